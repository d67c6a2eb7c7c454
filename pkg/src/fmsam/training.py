"""Loss composition, optimisation loop, horizon evaluation and ablation runs."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import Ablation, TrainingConfig
from .data import Dataset, PoolingHierarchy, frames_to_ms, mpjpe, temporal_downsample, zero_velocity_baseline
from .memory import BetaLog, beta_entropy
from .model import DTYPES, FMSAM, frames_to_rows, rows_to_frames
from .factorisation import subject_contrastive_loss, task_head_loss

log = logging.getLogger(__name__)

COMPONENTS = ("pose", "div", "cons", "sub", "task")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


def total_loss(components: dict, weights: dict):
    return sum(weights[k] * components[k] for k in COMPONENTS)


def lr_schedule(epoch: int, lr0: float = 2e-4, decay: float = 0.98, interval: int = 2) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay ** (epoch // interval)


# --- windows -----------------------------------------------------------------

@dataclass
class Windows:
    frames: np.ndarray  # (N, T_obs + T, J, 3), mm
    subject: np.ndarray  # (N,) int
    task: np.ndarray  # (N,) int
    actions: list[str]

    def __len__(self):
        return len(self.frames)


def make_windows(dataset: Dataset, split: str, config: TrainingConfig, stride: int,
                 actions: Sequence[str] | None = None, subjects: Sequence[str] | None = None) -> Windows:
    actions = list(actions or dataset.actions)
    subjects = list(subjects or dataset.subjects)
    length = config.t_obs + config.t_pred
    frames, subj, task = [], [], []
    for seq in dataset.split(split):
        seq = temporal_downsample(seq, config.downsample)
        for start in range(0, len(seq) - length + 1, stride):
            frames.append(seq.frames[start:start + length])
            subj.append(subjects.index(seq.subject_id) if seq.subject_id in subjects else -1)
            task.append(actions.index(seq.action_label))
    if frames:
        arr = np.stack(frames)
    else:
        J = dataset.sequences[0].n_joints if dataset.sequences else 22
        arr = np.zeros((0, length, J, 3))
    return Windows(arr, np.array(subj, dtype=np.int64), np.array(task, dtype=np.int64), actions)


def prepare_batch(frames: np.ndarray, config: TrainingConfig):
    """Padded network input and per-window targets, relative to the last observed pose.

    Returns ``(x, gt, last)``: ``x``/``gt`` are ``(B, K0, T_obs + T)`` in network
    units; ``last`` is ``(B, J, 3)`` in mm.
    """
    dtype = DTYPES[config.dtype]
    t_obs = config.t_obs
    last = frames[:, t_obs - 1]
    rel = (frames - last[:, None]) * config.coord_scale
    padded = rel.copy()
    padded[:, t_obs:] = 0.0  # replicated last observation, which is zero after centring
    x = frames_to_rows(torch.as_tensor(padded, dtype=dtype))
    gt = frames_to_rows(torch.as_tensor(rel, dtype=dtype))
    return x, gt, last


def predictions_mm(model: FMSAM, preds_finest: torch.Tensor, last: np.ndarray) -> np.ndarray:
    """Future frames ``(B, T, J, 3)`` in mm from the finest-scale output."""
    cfg = model.config
    future = rows_to_frames(preds_finest[..., cfg.t_obs:]).detach().cpu().numpy().astype(np.float64)
    return future / cfg.coord_scale + last[:, None]


# --- losses ------------------------------------------------------------------

def pose_loss(preds: list[torch.Tensor], gt_scales: list[torch.Tensor]) -> torch.Tensor:
    return torch.stack([((p - g) ** 2).mean() for p, g in zip(preds, gt_scales)]).mean()


def draw_pairs(subjects: np.ndarray, rng: np.random.Generator):
    """Partner index per item: same subject with probability 1/2 when the batch allows it."""
    n = len(subjects)
    partners = np.empty(n, dtype=np.int64)
    for i in range(n):
        same = np.flatnonzero((subjects == subjects[i]) & (np.arange(n) != i))
        diff = np.flatnonzero(subjects != subjects[i])
        want_same = rng.random() < 0.5
        pool = same if (want_same and len(same)) or not len(diff) else diff
        if not len(pool):
            pool = np.array([i])
        partners[i] = pool[rng.integers(len(pool))]
    return partners, (subjects[partners] == subjects).astype(np.float64)


def compute_losses(model: FMSAM, out: dict, gt: torch.Tensor, task: np.ndarray, subjects: np.ndarray,
                   rng: np.random.Generator) -> dict:
    zero = gt.new_zeros(())
    comps = {"pose": pose_loss(out["preds"], model.pooled(gt))}
    t = model.toggles
    comps["div"] = out["div"] if t.div_loss and "div" in out else zero
    comps["cons"] = out["cons"] if t.cons_loss and "cons" in out else zero
    if t.factorisation:
        comps["task"] = task_head_loss(out["task_logits"], torch.as_tensor(task), model.n_tasks)
        emb = out["subject_embedding"]
        partners, same = draw_pairs(subjects, rng)
        comps["sub"] = subject_contrastive_loss(emb, emb[torch.as_tensor(partners)], same,
                                                model.config.margin).mean()
    else:
        comps["task"] = comps["sub"] = zero
    return comps


# --- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: FMSAM
    optimizer: torch.optim.Optimizer
    log: list[dict] = field(default_factory=list)
    epoch: int = 0
    actions: list[str] = field(default_factory=list)
    subjects: list[str] = field(default_factory=list)


def build_model(config: TrainingConfig, hierarchy: PoolingHierarchy, n_tasks: int) -> FMSAM:
    torch.manual_seed(config.seed)
    return FMSAM(config, hierarchy, n_tasks)


def _occupancy(masks: torch.Tensor) -> list[float]:
    """Mean mass each segment keeps inside its own feature band."""
    F = masks.shape[-1]
    band = F // 3
    return [float(masks[:, i, :, i * band:(i + 1) * band].mean()) for i in range(3)]


def train(dataset: Dataset, config: TrainingConfig, resume: TrainResult | None = None,
          epochs: int | None = None, beta_log: str | Path | None = None) -> TrainResult:
    """Optimise with Adam under the step-decay schedule.

    Deterministic for a fixed ``config.seed``. ``resume`` continues from a
    previous result (its epoch counter, optimiser moments and memory).
    ``beta_log`` streams every committed slot-update weight vector to a CSV.
    """
    hierarchy = dataset.hierarchy or PoolingHierarchy.default()
    if resume is None:
        actions, subjects = dataset.actions, dataset.subjects
    else:
        actions, subjects = resume.actions, resume.subjects
    windows = make_windows(dataset, "train", config, config.train_stride, actions, subjects)
    if len(windows) == 0:
        raise ValueError("training split yields no windows")

    if resume is None:
        model = build_model(config, hierarchy, len(actions))
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
        result = TrainResult(model, optimizer, [], 0, actions, subjects)
    else:
        result = resume
        model, optimizer = result.model, result.optimizer
    if beta_log is not None and model.memory is not None:
        model.beta_log = BetaLog(beta_log, config.n_slots)
    end = config.epochs if epochs is None else result.epoch + epochs
    weights = config.loss_weights
    model.train()

    for epoch in range(result.epoch, end):
        lr = lr_schedule(epoch, config.lr, config.lr_decay, config.decay_interval)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([config.seed, epoch])
        gumbel = torch.Generator().manual_seed(config.seed * 1_000_003 + epoch)
        order = rng.permutation(len(windows))
        sums = {k: 0.0 for k in COMPONENTS}
        sums.update(total=0.0, entropy=0.0, correct=0.0, occ_sub=0.0, occ_task=0.0, occ_aux=0.0)
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, gt, _ = prepare_batch(windows.frames[idx], config)
            out = model(x, write=model.memory is not None, stochastic=True, generator=gumbel)
            comps = compute_losses(model, out, gt, windows.task[idx], windows.subject[idx], rng)
            loss = total_loss(comps, weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                    + ", ".join(f"{k}={float(v.detach() if torch.is_tensor(v) else v):.4g}" for k, v in comps.items()),
                    snapshot=model.state_arrays())
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            model.commit_memory(out)

            n_batches += 1
            for k in COMPONENTS:
                sums[k] += comps[k].item() if torch.is_tensor(comps[k]) else float(comps[k])
            sums["total"] += loss.item()
            if "beta" in out:
                sums["entropy"] += float(beta_entropy(out["beta"].detach()).mean())
            if "task_logits" in out:
                pred = out["task_logits"].argmax(-1).numpy()
                sums["correct"] += float((pred == windows.task[idx]).mean())
                occ = _occupancy(out["masks"].detach())
                for name, v in zip(("occ_sub", "occ_task", "occ_aux"), occ):
                    sums[name] += v
        row = {"epoch": epoch + 1, "lr": lr}
        for k in ("total",) + COMPONENTS:
            row[f"loss_{k}"] = sums[k] / n_batches
        for k in COMPONENTS:
            row[f"weighted_{k}"] = weights[k] * sums[k] / n_batches
        row["beta_entropy"] = sums["entropy"] / n_batches
        row["task_acc"] = sums["correct"] / n_batches
        for k in ("occ_sub", "occ_task", "occ_aux"):
            row[k] = sums[k] / n_batches
        result.log.append(row)
        result.epoch = epoch + 1
        log.info("epoch %d  loss %.5f  pose %.5f", epoch + 1, row["loss_total"], row["loss_pose"])
    return result


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# --- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    horizons: list[int]  # frames
    actions: list[str]
    values: dict[str, dict[int, float]]  # action -> horizon -> MPJPE (mm)
    fps: float = 25.0
    task_accuracy: float | None = None
    n_windows: int = 0

    def average(self, horizon: int) -> float:
        return float(np.mean([self.values[a][horizon] for a in self.actions]))

    def mean_over_horizons(self, horizons: Sequence[int] | None = None) -> float:
        return float(np.mean([self.average(h) for h in (horizons or self.horizons)]))

    def header(self) -> list[str]:
        return ["action"] + [f"{frames_to_ms(h, self.fps)}ms" for h in self.horizons]

    def table_rows(self) -> list[list[str]]:
        rows = [[a] + [f"{self.values[a][h]:.3f}" for h in self.horizons] for a in self.actions]
        rows.append(["Average"] + [f"{self.average(h):.3f}" for h in self.horizons])
        return rows

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerows(self.table_rows())
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def render_text(self) -> str:
        return render_table(self.header(), self.table_rows())


def render_table(header: list[str], rows: list[list[str]], footer: str | None = None) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                              for i, (c, w) in enumerate(zip(r, widths)))
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    if footer:
        lines.append(footer)
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list[list[str]]:
    return list(csv.reader(io.StringIO(text)))


def predict_windows(model: FMSAM, frames: np.ndarray, batch_size: int = 64, write: bool = False):
    """Future frames in mm and task logits for every window (memory writes frozen unless ``write``)."""
    cfg = model.config
    was_training = model.training
    model.eval()
    preds, logits, masks = [], [], []
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            x, _, last = prepare_batch(frames[start:start + batch_size], cfg)
            out = model(x, write=write and model.memory is not None)
            if write:
                model.commit_memory(out)
            preds.append(predictions_mm(model, out["preds"][0], last))
            if "task_logits" in out:
                logits.append(out["task_logits"].numpy())
                masks.append(out["masks"].numpy())
    model.train(was_training)
    cat = lambda xs: np.concatenate(xs) if xs else None
    return cat(preds), cat(logits), cat(masks)


def bucket_report(pred: np.ndarray, gt: np.ndarray, task: np.ndarray, actions: list[str],
                  horizons: Sequence[int], fps: float = 25.0) -> EvalReport:
    """MPJPE over the first ``h`` future frames, averaged over windows of each action."""
    values = {}
    for k, action in enumerate(actions):
        sel = np.flatnonzero(task == k)
        if len(sel) == 0:
            continue
        values[action] = {h: float(np.mean([mpjpe(pred[i, :h], gt[i, :h]) for i in sel])) for h in horizons}
    present = [a for a in actions if a in values]
    return EvalReport(list(horizons), present, values, fps, None, len(pred))


def evaluate(model: FMSAM | None, dataset: Dataset, horizons: Sequence[int], config: TrainingConfig,
             split: str = "test", actions: Sequence[str] | None = None, zero_velocity: bool = False,
             fps: float = 25.0) -> EvalReport:
    """Per-action, per-horizon MPJPE on ``split``.

    ``model=None`` or ``zero_velocity`` reports the last-pose baseline instead.
    """
    if max(horizons) > config.t_pred:
        raise ValueError(f"horizon {max(horizons)} exceeds the prediction length {config.t_pred}")
    windows = make_windows(dataset, split, config, config.eval_stride, actions)
    if len(windows) == 0:
        raise ValueError(f"split {split!r} yields no evaluation windows")
    gt = windows.frames[:, config.t_obs:]
    accuracy = None
    if zero_velocity or model is None:
        pred = np.stack([zero_velocity_baseline(w[:config.t_obs], config.t_pred) for w in windows.frames])
    else:
        pred, logits, _ = predict_windows(model, windows.frames, write=config.continual_eval)
        if logits is not None:
            accuracy = float((logits.argmax(-1) == windows.task).mean())
    report = bucket_report(pred, gt, windows.task, windows.actions, horizons, fps)
    report.task_accuracy = accuracy
    return report


def mask_argmax_disagreements(model: FMSAM, frames: np.ndarray) -> int:
    """Count mask coordinates whose winning segment varies across the given windows."""
    _, _, masks = predict_windows(model, frames)
    if masks is None:
        return 0
    winners = masks.argmax(axis=1)  # (N, K, F)
    return int((winners != winners[:1]).any(axis=0).sum())


# --- ablations ---------------------------------------------------------------

ABLATION_COLUMNS = ("Auxiliary Memory", "Subject", "Task", "Auxiliary", "Multi-Head Access",
                    "Diversity", "Stabilisation", "Dynamic Masking")


def toggle_marks(a: Ablation) -> list[bool]:
    e = a.effective()
    return [e.memory, e.factorisation, e.factorisation, e.factorisation, e.multi_head,
            e.div_loss, e.cons_loss, e.dynamic_mask]


@dataclass
class AblationTable:
    horizons: list[int]
    rows: list[tuple[str, Ablation, EvalReport]]
    seed: int
    fps: float = 25.0

    def header(self) -> list[str]:
        return ["Model", *ABLATION_COLUMNS] + [f"{frames_to_ms(h, self.fps)}" for h in self.horizons] + ["Average"]

    def csv_rows(self) -> list[list[str]]:
        out = []
        for name, ab, rep in self.rows:
            out.append([name, *("1" if m else "0" for m in toggle_marks(ab))]
                       + [f"{rep.average(h):.3f}" for h in self.horizons]
                       + [f"{rep.mean_over_horizons(self.horizons):.3f}"])
        return out

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerows(self.csv_rows())
        writer.writerow([f"# seed={self.seed}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def render_text(self) -> str:
        rows = [[r[0]] + ["✓" if c == "1" else "" for c in r[1:1 + len(ABLATION_COLUMNS)]]
                + r[1 + len(ABLATION_COLUMNS):] for r in self.csv_rows()]
        return render_table(self.header(), rows, footer=f"shared seed: {self.seed}")


def run_ablation(grid: dict[str, Ablation], dataset: Dataset, config: TrainingConfig,
                 horizons: Sequence[int], out_dir: str | Path | None = None) -> AblationTable:
    """Train and evaluate one model per grid entry with the same seed."""
    rows = []
    for name, ablation in grid.items():
        cfg = dataclasses.replace(config, ablation=dataclasses.replace(ablation))
        result = train(dataset, cfg)
        report = evaluate(result.model, dataset, horizons, cfg, actions=result.actions)
        rows.append((name, ablation, report))
        if out_dir is not None:
            sub = Path(out_dir) / slug(name)
            sub.mkdir(parents=True, exist_ok=True)
            write_metrics_csv(result.log, sub / "metrics.csv")
            report.to_csv(sub / "report.csv")
            (sub / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    return AblationTable(list(horizons), rows, config.seed)


def slug(name: str) -> str:
    keep = "".join(c.lower() if c.isalnum() else "-" for c in name)
    while "--" in keep:
        keep = keep.replace("--", "-")
    return keep.strip("-") or "variant"


def ablation_from_entry(entry: dict) -> Ablation:
    """Grid entry ``{"variant": "full", "memory": false, ...}``; toggles override the base variant."""
    from .config import variant

    base = variant(entry["variant"]) if "variant" in entry else Ablation()
    toggles = {k: v for k, v in entry.items() if k not in ("name", "variant")}
    Ablation.from_dict(toggles)
    return dataclasses.replace(base, **{k: bool(v) for k, v in toggles.items()})
