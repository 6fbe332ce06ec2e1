"""Statistics over experiment logs: integrated-loss percentages, loss
decomposition around task exposures, paired confidence intervals, KNN task
attribution of dreamed latents, windowed median rewards and Spearman rho.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

MISSING = None


def integrate(curve: Sequence[float]) -> float:
    """Trapezoidal area with unit spacing between epochs."""
    y = np.asarray(curve, dtype=np.float64)
    if y.size < 2:
        return 0.0
    return math.fsum((y[1:] + y[:-1]) * 0.5)


def percent_integrated_loss(curve_with: Sequence[float], curve_without: Sequence[float]) -> tuple[float, float]:
    if len(curve_with) != len(curve_without):
        raise ValueError("curves must have equal length")
    a_w, a_wo = integrate(curve_with), integrate(curve_without)
    total = a_w + a_wo
    if total == 0:
        raise ZeroDivisionError("zero total integrated area")
    p_w = a_w / total
    return p_w, 1.0 - p_w


@dataclass
class LossDecomposition:
    full: float
    preservation: float
    transfer: float
    reconsolidation: float


def exposure_epochs(schedule: Sequence[tuple[int, int]], task: int) -> list[int]:
    """Global epoch index at which each of ``task``'s exposures starts."""
    starts, cursor = [], 0
    for t, n in schedule:
        if t == task:
            starts.append(cursor)
        cursor += n
    return starts


def decompose_loss(curve: Sequence[float], schedule: Sequence[tuple[int, int]], task: int) -> LossDecomposition:
    starts = exposure_epochs(schedule, task)
    if not starts:
        raise KeyError(f"task {task} absent from schedule")
    first, last = starts[0], starts[-1]
    y = np.asarray(curve, dtype=np.float64)
    transfer = integrate(y[:first + 1])
    preservation = integrate(y[first:])
    return LossDecomposition(integrate(y), preservation, transfer, integrate(y[last:]))


@dataclass
class PairedDifference:
    mean: float
    se: float
    ci_lo: float
    ci_hi: float
    n: int

    def excludes_zero(self) -> bool:
        return self.ci_lo > 0 or self.ci_hi < 0


def paired_difference(diffs: Sequence[float], z: float = 1.96) -> PairedDifference:
    d = np.asarray(diffs, dtype=np.float64)
    if d.size < 2:
        raise ValueError("need at least 2 replications")
    mean = float(d.mean())
    se = float(d.std(ddof=1) / math.sqrt(d.size))
    return PairedDifference(mean, se, mean - z * se, mean + z * se, int(d.size))


def pairwise_condition_difference(pairs: Sequence[tuple[dict[int, Sequence[float]], dict[int, Sequence[float]]]]
                                  ) -> dict[int, PairedDifference]:
    """``pairs`` holds one (with, without) pair of {task: curve} maps per replication."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 replications")
    tasks = sorted(pairs[0][0])
    out = {}
    for task in tasks:
        diffs = []
        for with_curves, without_curves in pairs:
            if task not in with_curves or task not in without_curves:
                raise ValueError(f"unpaired logs for task {task}")
            p_w, p_wo = percent_integrated_loss(with_curves[task], without_curves[task])
            diffs.append(p_w - p_wo)
        out[task] = paired_difference(diffs)
    return out


def knn_labels(queries: np.ndarray, ref: np.ndarray, ref_labels: np.ndarray, k: int) -> np.ndarray:
    """Majority vote over the k Euclidean nearest references.

    Neighbours are ordered by (distance, reference index).  Vote ties go to the
    label with the smallest summed neighbour distance, then the lowest label.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    ref = np.asarray(ref, dtype=np.float64)
    ref_labels = np.asarray(ref_labels, dtype=np.int64)
    if k < 1 or len(ref) == 0:
        raise ValueError("k must be >= 1 and the reference set nonempty")
    k = min(k, len(ref))
    labels = np.empty(len(queries), dtype=np.int64)
    chunk = 512
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = (q * q).sum(1)[:, None] - 2.0 * q @ ref.T + (ref * ref).sum(1)[None, :]
        dist = np.sqrt(np.maximum(d2, 0.0))
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for row in range(len(q)):
            nb = order[row]
            nl = ref_labels[nb]
            nd = dist[row, nb]
            best = None
            for lab in np.unique(nl):
                sel = nl == lab
                key = (-int(sel.sum()), float(nd[sel].sum()), int(lab))
                if best is None or key < best:
                    best = key
            labels[s + row] = best[2]
    return labels


def knn_task_attribution(pseudo_latents: np.ndarray, ref_latents: np.ndarray, ref_tasks: np.ndarray,
                         k: int = 5, num_tasks: int | None = None) -> np.ndarray:
    """Proportion of pseudo-latents assigned to each task (sums to 1)."""
    pseudo_latents = np.asarray(pseudo_latents)
    if len(pseudo_latents) == 0:
        raise ValueError("empty query set")
    labels = knn_labels(pseudo_latents, ref_latents, ref_tasks, k)
    n = num_tasks if num_tasks is not None else int(np.max(ref_tasks)) + 1
    return np.bincount(labels, minlength=n) / len(labels)


def median_reward(end_frames: Sequence[int], returns: Sequence[float], window_frames: int,
                  n_windows: int | None = None) -> list[float | None]:
    """Median completed-episode return per window of frames; None where no episode ended."""
    if window_frames <= 0:
        raise ValueError("window_frames must be positive")
    end_frames = np.asarray(end_frames, dtype=np.int64)
    returns = np.asarray(returns, dtype=np.float64)
    if n_windows is None:
        n_windows = int((end_frames.max() - 1) // window_frames + 1) if end_frames.size else 0
    buckets = (end_frames - 1) // window_frames
    out: list[float | None] = []
    for w in range(n_windows):
        sel = returns[buckets == w]
        out.append(float(np.median(sel)) if sel.size else MISSING)
    return out


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman rho (Pearson on average ranks) with the t-approximation p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need equal-length inputs with at least 3 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("constant input has undefined ranks")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    rho = float((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)))
    n = x.size
    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * stats.t.sf(abs(t), n - 2))


# ---------------------------------------------------------------------------
# experiment logs and the CSV suite
# ---------------------------------------------------------------------------

CONDITION_NAMES = {True: "rehearsal", False: "none"}


@dataclass
class MetricsLog:
    """Everything one run (one condition of one replication) measured."""

    condition: str
    rep: int
    seed: int
    tasks: list[str]
    schedule: list[tuple[int, int]]
    loss_rows: list[tuple[int, int, int, float]] = field(default_factory=list)   # epoch, trained, eval, loss
    batch_rows: list[tuple[int, int, int]] = field(default_factory=list)         # epoch, real, sim
    reward_events: list[tuple[int, int, float]] = field(default_factory=list)    # end frame, task, return
    attribution: list[tuple[int, list[float]]] = field(default_factory=list)     # entry, proportions
    reward_window: int = 5000

    def curves(self) -> dict[int, list[float]]:
        """Per evaluated task, loss by epoch."""
        out: dict[int, list[float]] = {}
        for epoch, _, task, loss in sorted(self.loss_rows, key=lambda r: (r[2], r[0])):
            out.setdefault(task, []).append(loss)
        return out

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsLog":
        raw = json.loads(text)
        return cls(raw["condition"], raw["rep"], raw["seed"], list(raw["tasks"]),
                   [tuple(e) for e in raw["schedule"]],
                   [tuple(r) for r in raw["loss_rows"]],
                   [tuple(r) for r in raw["batch_rows"]],
                   [tuple(r) for r in raw["reward_events"]],
                   [(int(e), list(p)) for e, p in raw["attribution"]], raw["reward_window"])

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "MetricsLog":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def pair_logs(logs: Sequence[MetricsLog]) -> list[tuple[MetricsLog, MetricsLog]]:
    """Match rehearsal and no-rehearsal logs by replication."""
    by_rep: dict[int, dict[str, MetricsLog]] = {}
    for lg in logs:
        by_rep.setdefault(lg.rep, {})[lg.condition] = lg
    pairs = []
    for rep in sorted(by_rep):
        both = by_rep[rep]
        if set(both) == {"rehearsal", "none"}:
            if both["rehearsal"].schedule != both["none"].schedule:
                raise ValueError(f"replication {rep}: conditions ran different schedules")
            pairs.append((both["rehearsal"], both["none"]))
    return pairs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_report(logs: Sequence[MetricsLog], outdir: str | Path) -> dict[str, Path]:
    """Write loss_curves, summary, decomposition, attribution and rewards CSVs."""
    if not logs:
        raise ValueError("no logs to report")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    logs = sorted(logs, key=lambda lg: (lg.rep, lg.condition))
    tasks = logs[0].tasks
    paths = {name: outdir / f"{name}.csv" for name in
             ("loss_curves", "summary", "decomposition", "attribution", "rewards")}

    _write_csv(paths["loss_curves"], ("epoch", "trained_task", "eval_task", "loss", "condition", "rep"),
               ((e, tasks[t], tasks[j], loss, lg.condition, lg.rep)
                for lg in logs for e, t, j, loss in lg.loss_rows))

    pairs = pair_logs(logs)
    summary = []
    diffs = {}
    if len(pairs) >= 2:
        diffs = pairwise_condition_difference([(w.curves(), wo.curves()) for w, wo in pairs])
    for j, name in enumerate(tasks):
        with_pcts, without_pcts = [], []
        for w, wo in pairs:
            p_w, p_wo = percent_integrated_loss(w.curves()[j], wo.curves()[j])
            with_pcts.append(p_w)
            without_pcts.append(p_wo)
        if pairs:
            row = [name, float(np.mean(with_pcts)), float(np.mean(without_pcts)),
                   float(np.mean(with_pcts) - np.mean(without_pcts))]
        else:
            # a single condition: it holds the whole integrated loss
            present = {lg.condition for lg in logs}
            row = [name, 1.0 if "rehearsal" in present else None, 1.0 if "none" in present else None, None]
        pd = diffs.get(j)
        row += [pd.ci_lo, pd.ci_hi] if pd else [None, None]
        summary.append(row)
    _write_csv(paths["summary"], ("task", "pct_with", "pct_without", "diff", "ci_lo", "ci_hi"), summary)

    decomp = []
    for lg in logs:
        curves = lg.curves()
        for j, name in enumerate(tasks):
            d = decompose_loss(curves[j], lg.schedule, j)
            decomp.append((name, lg.condition, lg.rep, d.full, d.preservation, d.transfer, d.reconsolidation))
    _write_csv(paths["decomposition"],
               ("task", "condition", "rep", "full", "preservation", "transfer", "reconsolidation"), decomp)

    _write_csv(paths["attribution"], ("entry", "task", "proportion", "condition", "rep"),
               ((entry, tasks[j], p, lg.condition, lg.rep)
                for lg in logs for entry, props in lg.attribution for j, p in enumerate(props)))

    reward_rows = []
    for lg in logs:
        if not lg.reward_events:
            continue
        ends = [e[0] for e in lg.reward_events]
        window = lg.reward_window
        n_windows = (max(ends) - 1) // window + 1
        for j, name in enumerate(tasks):
            sel = [(f, r) for f, t, r in lg.reward_events if t == j]
            if not sel:
                continue
            med = median_reward([f for f, _ in sel], [r for _, r in sel], window, n_windows)
            reward_rows += [(w, name, m, lg.condition, lg.rep) for w, m in enumerate(med)]
    _write_csv(paths["rewards"], ("window", "task", "median_reward", "condition", "rep"), reward_rows)
    return paths
