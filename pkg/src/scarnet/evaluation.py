"""Segmentation metrics, scar burden, agreement statistics and the Monte
Carlo noise-robustness harness."""
from __future__ import annotations

import csv
import json
import math
import statistics
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .errors import PairingError, ShapeError
from .phantom import BLOOD_POOL, MYOCARDIUM, SCAR, add_gaussian_noise, mask_path, read_mask

EVAL_CLASSES = {"myocardium": MYOCARDIUM, "blood": BLOOD_POOL, "scar": SCAR}
LOA_Z = 1.96


def dice_score(pred, ref, cls: int) -> float:
    """Hard DICE of one class; 1.0 if absent from both, 0.0 if from one."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction {pred.shape} and reference {ref.shape} differ")
    p = pred == cls
    g = ref == cls
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def scar_volume_fraction(mask) -> float:
    """Scar pixels over scar + myocardium pixels (0.0 when no wall)."""
    mask = np.asarray(mask)
    scar = int((mask == SCAR).sum())
    wall = scar + int((mask == MYOCARDIUM).sum())
    return scar / wall if wall else 0.0


def _sample_std(x):
    # exact rational arithmetic: identical values give exactly 0
    x = [float(v) for v in np.asarray(x, dtype=np.float64).ravel()]
    return statistics.stdev(x) if len(x) > 1 else 0.0


@dataclass
class BlandAltmanResult:
    bias: float
    sd_diff: float
    loa_low: float
    loa_high: float
    cov: Optional[float]
    percent_bias: Optional[float]
    mean_value: float
    n: int


def _pairs(pairs):
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("expected a sequence of (a, b) pairs")
    return arr[:, 0], arr[:, 1]


def bland_altman(pairs) -> BlandAltmanResult:
    """Agreement of ``(auto, manual)`` pairs.

    ``cov`` is the SD of the differences over the mean of the pairwise
    averages; it and ``percent_bias`` are None when that mean is zero.
    """
    auto, manual = _pairs(pairs)
    if auto.size < 2:
        raise ValueError("Bland-Altman analysis needs at least 2 pairs")
    diff = auto - manual
    bias = float(diff.mean())
    sd = _sample_std(diff)
    mean_value = float(((auto + manual) / 2).mean())
    cov = sd / mean_value if mean_value != 0 else None
    pct = bias / mean_value if mean_value != 0 else None
    return BlandAltmanResult(bias, sd, bias - LOA_Z * sd, bias + LOA_Z * sd, cov, pct, mean_value, int(auto.size))


class DegenerateFitError(ValueError):
    pass


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def linear_fit(pairs) -> LinearFit:
    """Ordinary least squares ``y = slope * x + intercept`` over ``(x, y)`` pairs."""
    x, y = _pairs(pairs)
    if x.size < 2:
        raise DegenerateFitError("a line fit needs at least 2 points")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0:
        raise DegenerateFitError("x values have zero variance")
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    intercept = float(ym - slope * xm)
    ss_res = float(((y - (slope * x + intercept)) ** 2).sum())
    ss_tot = float(((y - ym) ** 2).sum())
    if ss_tot == 0:
        r2 = 1.0 if ss_res == 0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return LinearFit(slope, intercept, r2)


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"median": None, "q25": None, "q75": None, "mean": None, "std": None, "n": 0}
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75),
            "mean": float(v.mean()), "std": _sample_std(v), "n": int(v.size)}


METRIC_COLUMNS = ["id", "dice_myocardium", "dice_blood", "dice_scar",
                  "scar_volume_fraction_pred", "scar_volume_fraction_ref"]


@dataclass
class MetricsReport:
    rows: list
    aggregates: dict
    bland_altman: Optional[BlandAltmanResult] = None
    fit: Optional[LinearFit] = None
    fit_error: Optional[str] = None

    def summary(self) -> dict:
        return {
            "n_samples": len(self.rows),
            "aggregates": self.aggregates,
            "bland_altman": None if self.bland_altman is None else asdict(self.bland_altman),
            "linear_fit": None if self.fit is None else asdict(self.fit),
            "linear_fit_error": self.fit_error,
        }


def evaluate_masks(pred: Dict[str, np.ndarray], ref: Dict[str, np.ndarray]) -> MetricsReport:
    """Per-sample and aggregate metrics for masks paired by sample id."""
    unmatched = set(pred) ^ set(ref)
    if unmatched or not pred:
        raise PairingError(unmatched)
    rows = []
    for sid in sorted(ref):
        p, g = pred[sid], ref[sid]
        rows.append({
            "id": sid,
            "dice_myocardium": dice_score(p, g, MYOCARDIUM),
            "dice_blood": dice_score(p, g, BLOOD_POOL),
            "dice_scar": dice_score(p, g, SCAR),
            "scar_volume_fraction_pred": scar_volume_fraction(p),
            "scar_volume_fraction_ref": scar_volume_fraction(g),
        })
    aggregates = {c: summarize([r[c] for r in rows]) for c in METRIC_COLUMNS[1:]}
    pairs = [(r["scar_volume_fraction_pred"], r["scar_volume_fraction_ref"]) for r in rows]
    ba = fit = err = None
    if len(pairs) >= 2:
        ba = bland_altman(pairs)
        try:
            # manual burden on x, automatic on y
            fit = linear_fit([(m, a) for a, m in pairs])
        except DegenerateFitError as exc:
            err = str(exc)
    return MetricsReport(rows, aggregates, ba, fit, err)


def load_mask_dir(path) -> Dict[str, np.ndarray]:
    root = Path(path)
    if not root.is_dir():
        raise PairingError([])
    out = {}
    for f in sorted(root.glob("msk_*.raw")):
        sid = f.stem[len("msk_"):]
        out[sid] = read_mask(f)
    return out


def evaluate_dirs(pred_dir, ref_dir) -> MetricsReport:
    return evaluate_masks(load_mask_dir(pred_dir), load_mask_dir(ref_dir))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_metrics(report: MetricsReport, out_dir, plots=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in report.rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    if plots and report.bland_altman is not None:
        pairs = [(r["scar_volume_fraction_pred"], r["scar_volume_fraction_ref"]) for r in report.rows]
        plot_bland_altman(pairs, report.bland_altman, out / "bland_altman.png")
        if report.fit is not None:
            plot_correlation(pairs, report.fit, out / "correlation.png")
    return out


def plot_bland_altman(pairs, ba: BlandAltmanResult, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    auto, manual = _pairs(pairs)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter((auto + manual) / 2, auto - manual, s=12)
    ax.axhline(ba.bias, color="k", label=f"bias {ba.bias:.4f}")
    ax.axhline(ba.loa_low, color="r", ls="--", label="bias ± 1.96 SD")
    ax.axhline(ba.loa_high, color="r", ls="--")
    ax.set_xlabel("mean scar fraction")
    ax.set_ylabel("automatic - manual")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_correlation(pairs, fit: LinearFit, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    auto, manual = _pairs(pairs)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(manual, auto, s=12)
    xs = np.linspace(manual.min(), manual.max(), 2)
    ax.plot(xs, fit.slope * xs + fit.intercept, "r-",
            label=f"y = {fit.slope:.2f}x + {fit.intercept:.2f}, R² = {fit.r_squared:.2f}")
    ax.set_xlabel("manual scar fraction")
    ax.set_ylabel("automatic scar fraction")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- Monte Carlo noise robustness ----------------------------------------------

MC_COLUMNS = ["iteration", "dice_myocardium", "dice_blood", "dice_scar"]


def noise_seed(seed: int, iteration: int, sample_id: str) -> np.random.SeedSequence:
    # keyed by identity, not by execution order
    return np.random.SeedSequence([seed, iteration, zlib.crc32(sample_id.encode())])


@dataclass
class MonteCarloReport:
    n_iterations: int
    noise_sigma: float
    seed: int
    dice: Dict[str, list] = field(default_factory=dict)
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)
    cov: Dict[str, Optional[float]] = field(default_factory=dict)

    def summary(self):
        return {"n_iterations": self.n_iterations, "noise_sigma": self.noise_sigma, "seed": self.seed,
                "mean": self.mean, "std": self.std, "cov": self.cov}


def segment(model, images: Sequence[np.ndarray], batch_size=8) -> list:
    import torch

    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.stack(images[i:i + batch_size])).to(dtype)
            out.extend(model(x).argmax(dim=1).to(torch.uint8).numpy())
    return out


def monte_carlo(model, samples, n_iter: int = 200, sigma: float = 0.05, seed: int = 0,
                segment_fn=None) -> MonteCarloReport:
    """Re-segment every sample under ``n_iter`` seeded noise draws.

    ``segment_fn(images) -> masks`` replaces the model when given.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    if segment_fn is None:
        segment_fn = lambda imgs: segment(model, imgs)
    report = MonteCarloReport(n_iter, float(sigma), int(seed), {c: [] for c in EVAL_CLASSES})
    for it in range(n_iter):
        noisy = [add_gaussian_noise(s.image, sigma, np.random.default_rng(noise_seed(seed, it, s.id)))
                 for s in samples]
        preds = segment_fn(noisy)
        for name, cls in EVAL_CLASSES.items():
            report.dice[name].append(float(np.mean([dice_score(p, s.mask, cls) for p, s in zip(preds, samples)])))
    for name, values in report.dice.items():
        m = float(np.mean(values))
        sd = _sample_std(values)
        report.mean[name] = m
        report.std[name] = sd
        report.cov[name] = sd / m if m != 0 else None
    return report


def write_monte_carlo(report: MonteCarloReport, out_dir, plots=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "montecarlo.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MC_COLUMNS)
        names = list(EVAL_CLASSES)
        for it in range(report.n_iterations):
            w.writerow([it] + [repr(report.dice[n][it]) for n in names])
    (out / "montecarlo_summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    if plots:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        ax.boxplot([report.dice[n] for n in EVAL_CLASSES])
        ax.set_xticks(range(1, len(EVAL_CLASSES) + 1), list(EVAL_CLASSES))
        ax.set_ylabel("DICE")
        ax.set_title(f"{report.n_iterations} noise draws, sigma {report.noise_sigma}")
        fig.tight_layout()
        fig.savefig(out / "montecarlo.png", dpi=100)
        plt.close(fig)
    return out
