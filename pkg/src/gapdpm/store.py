"""Retained posterior draws and their on-disk CSV layout.

A store directory holds::

    scalars.csv       draw,sigma,tau,M,p,K,w_last
    beta.csv          draw,gap,covariate,value          (long format)
    atoms.csv         draw,m0,m1..mL                    predictive atom draws
    inclusion.csv     draw,lag,prob                     (long format)
    allocations.csv   draw,subject,cluster              (long format, 0-based)
    meta.json         model, sampler settings, dimensions, run info
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DependenceSpec, Hyperparameters, ModelConfig

SCALARS = ("sigma", "tau", "M", "p", "K", "w_last")


def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class DrawStore:
    sigma: np.ndarray
    tau: np.ndarray
    M: np.ndarray
    p: np.ndarray
    K: np.ndarray
    w_last: np.ndarray
    beta: np.ndarray          # (n, J, q)
    atoms: np.ndarray         # (n, 1 + L) predictive atom draws
    inclusion: np.ndarray     # (n, L) weight of atoms using each lag
    z: np.ndarray             # (n, N)
    dependence: DependenceSpec = field(default_factory=DependenceSpec)
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    covariate_names: tuple[str, ...] = ()
    subject_ids: tuple[str, ...] = ()
    info: dict = field(default_factory=dict)
    wall_time: float | None = None

    @property
    def n_draws(self) -> int:
        return int(self.sigma.size)

    @property
    def J(self) -> int:
        return self.beta.shape[1]

    @property
    def q(self) -> int:
        return self.beta.shape[2]

    @classmethod
    def from_records(cls, records, model: ModelConfig, config=None, dataset=None,
                     J=0, q=0, N=0) -> "DrawStore":
        L = model.dependence.n_lags
        n = len(records)

        def stack(key, shape):
            return (np.array([r[key] for r in records], dtype=float) if n
                    else np.zeros((0,) + shape))

        info = {"scale_prior": model.scale_prior, "shared_beta": model.shared_beta}
        if config is not None:
            info.update(iterations=config.iterations, burn_in=config.burn_in, thin=config.thin)
        return cls(
            sigma=stack("sigma", ()), tau=stack("tau", ()), M=stack("M", ()),
            p=np.array([r["p"] for r in records], dtype=int),
            K=np.array([r["K"] for r in records], dtype=int),
            w_last=stack("w_last", ()),
            beta=stack("beta", (J, q)).reshape(n, J, q),
            atoms=stack("atom", (1 + L,)).reshape(n, 1 + L),
            inclusion=stack("incl", (L,)).reshape(n, L),
            z=np.array([r["z"] for r in records], dtype=int).reshape(n, N),
            dependence=model.dependence, hyper=model.hyper,
            covariate_names=tuple(dataset.covariate_names) if dataset is not None else (),
            subject_ids=(tuple(s.subject_id for s in dataset.subjects)
                         if dataset is not None else ()),
            info=info,
        )

    def subset(self, keep) -> "DrawStore":
        """Store restricted to the draws selected by a boolean mask or index array."""
        keep = np.asarray(keep)
        kw = {k: getattr(self, k)[keep] for k in
              ("sigma", "tau", "M", "p", "K", "w_last", "beta", "atoms", "inclusion", "z")}
        return DrawStore(**kw, dependence=self.dependence, hyper=self.hyper,
                         covariate_names=self.covariate_names, subject_ids=self.subject_ids,
                         info=dict(self.info), wall_time=self.wall_time)

    def thinned(self, k: int) -> "DrawStore":
        return self.subset(np.arange(0, self.n_draws, k))

    @staticmethod
    def concat(stores) -> "DrawStore":
        stores = list(stores)
        first = stores[0]
        kw = {k: np.concatenate([getattr(s, k) for s in stores]) for k in
              ("sigma", "tau", "M", "p", "K", "w_last", "beta", "atoms", "inclusion", "z")}
        return DrawStore(**kw, dependence=first.dependence, hyper=first.hyper,
                         covariate_names=first.covariate_names, subject_ids=first.subject_ids,
                         info=dict(first.info))

    # ------------------------------------------------------------------ I/O

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with (d / "scalars.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("draw",) + SCALARS)
            for i in range(self.n_draws):
                w.writerow([i, _fmt(self.sigma[i]), _fmt(self.tau[i]), _fmt(self.M[i]),
                            int(self.p[i]), int(self.K[i]), _fmt(self.w_last[i])])
        with (d / "beta.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("draw", "gap", "covariate", "value"))
            names = self.covariate_names or tuple(f"x{r + 1}" for r in range(self.q))
            for i in range(self.n_draws):
                for j in range(self.J):
                    for r in range(self.q):
                        w.writerow([i, j + 1, names[r], _fmt(self.beta[i, j, r])])
        with (d / "atoms.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            L = self.atoms.shape[1] - 1
            w.writerow(["draw"] + [f"m{l}" for l in range(L + 1)])
            for i in range(self.n_draws):
                w.writerow([i] + [_fmt(v) for v in self.atoms[i]])
        with (d / "inclusion.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("draw", "lag", "prob"))
            for i in range(self.n_draws):
                for l in range(self.inclusion.shape[1]):
                    w.writerow([i, l + 1, _fmt(self.inclusion[i, l])])
        with (d / "allocations.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("draw", "subject", "cluster"))
            for i in range(self.n_draws):
                for s, zz in enumerate(self.z[i]):
                    w.writerow([i, s, int(zz)])
        meta = {
            "dependence": self.dependence.to_dict(),
            "hyper": {k: getattr(self.hyper, k) for k in self.hyper.__dataclass_fields__},
            "covariate_names": list(self.covariate_names),
            "subject_ids": list(self.subject_ids),
            "n_draws": self.n_draws, "J": self.J, "q": self.q,
            "N": int(self.z.shape[1]) if self.z.ndim == 2 else 0,
            "info": self.info,
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "DrawStore":
        d = Path(directory)
        if not (d / "meta.json").exists():
            raise FileNotFoundError(f"{d}: not a draw store (meta.json missing)")
        meta = json.loads((d / "meta.json").read_text())
        n, J, q, N = meta["n_draws"], meta["J"], meta["q"], meta["N"]
        dep = DependenceSpec(**meta["dependence"])
        hyper = Hyperparameters(**meta["hyper"])
        L = dep.n_lags
        sc = np.zeros((n, 1 + len(SCALARS)))
        if n:
            sc = np.loadtxt(d / "scalars.csv", delimiter=",", skiprows=1, ndmin=2)
            sc = sc.reshape(n, 1 + len(SCALARS))
        beta = np.zeros((n, J, q))
        with (d / "beta.csv").open() as fh:
            for row in csv.DictReader(fh):
                r = meta["covariate_names"].index(row["covariate"]) if meta["covariate_names"] \
                    else int(row["covariate"][1:]) - 1
                beta[int(row["draw"]), int(row["gap"]) - 1, r] = float(row["value"])
        atoms = np.zeros((n, 1 + L))
        if n:
            raw = np.loadtxt(d / "atoms.csv", delimiter=",", skiprows=1, ndmin=2)
            atoms = raw.reshape(n, 2 + L)[:, 1:]
        inc = np.zeros((n, L))
        if L and n:
            raw = np.loadtxt(d / "inclusion.csv", delimiter=",", skiprows=1, ndmin=2)
            inc[raw[:, 0].astype(int), raw[:, 1].astype(int) - 1] = raw[:, 2]
        z = np.zeros((n, N), dtype=int)
        if n and N:
            raw = np.loadtxt(d / "allocations.csv", delimiter=",", skiprows=1, ndmin=2, dtype=int)
            z[raw[:, 0], raw[:, 1]] = raw[:, 2]
        return cls(sigma=sc[:, 1], tau=sc[:, 2], M=sc[:, 3], p=sc[:, 4].astype(int),
                   K=sc[:, 5].astype(int), w_last=sc[:, 6], beta=beta, atoms=atoms,
                   inclusion=inc, z=z, dependence=dep, hyper=hyper,
                   covariate_names=tuple(meta["covariate_names"]),
                   subject_ids=tuple(meta["subject_ids"]), info=meta.get("info", {}))
