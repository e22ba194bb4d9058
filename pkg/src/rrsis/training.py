"""Training loop, checkpoints, evaluation and the ablation matrix."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, apply_mode
from .data import ReferringSample, write_ppm
from .losses import total_loss
from .metrics import MetricReport, counts, report_from_counts
from .model import ReferringSegmenter, build_model, to_tensor
from .union_encoder import Vocabulary

log = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def parameter_groups(model: ReferringSegmenter, cfg: RunConfig) -> dict[str, list[str]]:
    """Split trainable parameter names into the base and fusion learning-rate groups."""
    fusion = tuple(cfg["optim.fusion_groups"])
    groups = {"base": [], "fusion": []}
    for name, p in model.named_parameters():
        if p.requires_grad:
            groups["fusion" if name.split(".", 1)[0] in fusion else "base"].append(name)
    return groups


def make_optimizer(model: ReferringSegmenter, cfg: RunConfig) -> torch.optim.AdamW:
    params = dict(model.named_parameters())
    groups = parameter_groups(model, cfg)
    return torch.optim.AdamW(
        [{"params": [params[n] for n in groups["base"]], "lr": cfg["optim.lr"], "base_lr": cfg["optim.lr"]},
         {"params": [params[n] for n in groups["fusion"]], "lr": cfg["optim.lr_fusion"],
          "base_lr": cfg["optim.lr_fusion"]}],
        betas=(cfg["optim.beta1"], cfg["optim.beta2"]), weight_decay=cfg["optim.weight_decay"])


def lr_factor(step: int, cfg: RunConfig) -> float:
    factor = cfg["optim.decay_factor"] if step >= cfg["optim.steps"] - cfg["optim.decay_last"] else 1.0
    if step < cfg["optim.warmup"]:
        factor *= (step + 1) / cfg["optim.warmup"]
    return factor


def sample_order(step: int, n: int, seed: int) -> int:
    epoch, k = divmod(step, n)
    return int(np.random.default_rng([seed, epoch]).permutation(n)[k])


def save_checkpoint(path, model, optimizer, step: int, cfg: RunConfig) -> None:
    torch.save({"params": model.state_dict(), "optim": optimizer.state_dict(), "step": step,
                "config": cfg.to_text(), "config_hash": cfg.hash(), "vocab": model.vocab.tokens},
               path)


def load_checkpoint(path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as err:
        raise CheckpointError(f"{path}: cannot load checkpoint ({err})") from None


def model_from_checkpoint(ckpt: dict, cfg: RunConfig | None = None) -> tuple[ReferringSegmenter, RunConfig]:
    cfg = cfg or RunConfig.from_text(ckpt["config"])
    vocab = Vocabulary(ckpt["vocab"][3:])
    model = build_model(cfg, vocab)
    own = model.state_dict()
    for name, tensor in ckpt["params"].items():
        if name not in own:
            raise CheckpointError(f"checkpoint parameter {name} does not exist in this configuration")
        if own[name].shape != tensor.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {tuple(tensor.shape)} "
                                  f"does not match configured shape {tuple(own[name].shape)}")
    missing = sorted(set(own) - set(ckpt["params"]))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    model.load_state_dict(ckpt["params"])
    return model, cfg


def _dump_nan(out: Path, step: int, idx: int, sample: ReferringSample, terms: dict) -> Path:
    path = out / "nan_dump.json"
    path.write_text(json.dumps({"step": step, "sample": idx, "seed": sample.seed,
                                "expression": sample.expression,
                                "terms": {k: v.item() for k, v in terms.items()}}, indent=2))
    return path


def train(cfg: RunConfig, samples: list[ReferringSample], out_dir=None, resume=None,
          stop_at: int | None = None) -> tuple[ReferringSegmenter, list[dict]]:
    """Train for ``optim.steps`` batch-size-1 steps; returns the model and loss records.

    ``stop_at`` ends the run early (the schedule is still that of the full run),
    which together with ``resume`` allows interrupted training.
    """
    apply_mode(cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
    start = 0
    if resume:
        ckpt = load_checkpoint(resume)
        model, _ = model_from_checkpoint(ckpt, cfg)
        optimizer = make_optimizer(model, cfg)
        optimizer.load_state_dict(ckpt["optim"])
        start = ckpt["step"]
    else:
        model = build_model(cfg)
        optimizer = make_optimizer(model, cfg)
    model.train()
    weights = cfg.loss_weights()
    steps = cfg["optim.steps"] if stop_at is None else min(stop_at, cfg["optim.steps"])
    every = cfg["train.checkpoint_every"]
    tensors = {}
    records = []
    log_file = open(out / LOG_NAME, "a" if resume else "w") if out else None
    try:
        for step in range(start, steps):
            idx = sample_order(step, len(samples), cfg["seed"])
            sample = samples[idx]
            if idx not in tensors:
                tensors[idx] = (to_tensor(sample.image), model.tokenize(sample.expression),
                                torch.as_tensor(sample.gt_mask.astype(np.float64),
                                                dtype=torch.get_default_dtype()))
            image, ids, gt = tensors[idx]
            for group in optimizer.param_groups:
                group["lr"] = group["base_lr"] * lr_factor(step, cfg)
            output = model(image, ids)
            loss, terms = total_loss(output.logits, gt, output.text_weight, weights)
            if not torch.isfinite(loss):
                where = _dump_nan(out, step, idx, sample, terms) if out else None
                raise TrainingError(f"non-finite loss at step {step} (sample {idx})"
                                    + (f"; diagnostics in {where}" if where else ""))
            optimizer.zero_grad()
            loss.backward()
            if cfg["optim.clip_norm"] > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg["optim.clip_norm"])
            optimizer.step()
            rec = {"step": step + 1, "sample": idx, **{k: v.item() for k, v in terms.items()},
                   "total": loss.item()}
            records.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            if out and ((step + 1) % every == 0 or step + 1 == steps):
                save_checkpoint(out / f"ckpt_{step + 1:05d}.pt", model, optimizer, step + 1, cfg)
                save_checkpoint(out / "last.pt", model, optimizer, step + 1, cfg)
    finally:
        if log_file:
            log_file.close()
    return model, records


def predict_all(model: ReferringSegmenter, samples) -> list[np.ndarray]:
    model.eval()
    return [model.predict(s.image, s.expression) for s in samples]


def evaluate_model(model: ReferringSegmenter, samples, out_dir=None, overlay_dir=None) -> MetricReport:
    preds = predict_all(model, samples)
    pairs = [counts(p, s.gt_mask) for p, s in zip(preds, samples)]
    report = report_from_counts(pairs)
    if out_dir:
        write_report(report, pairs, out_dir)
    if overlay_dir:
        write_overlays(samples, preds, overlay_dir)
    return report


def write_report(report: MetricReport, pairs, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    with open(out / "per_sample.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "iou", "intersection", "union"])
        for i, (inter, union) in enumerate(pairs):
            writer.writerow([i, repr(inter / union if union else 1.0), inter, union])


def write_overlays(samples, preds, overlay_dir) -> None:
    out = Path(overlay_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (s, pred) in enumerate(zip(samples, preds)):
        img = s.image.copy()
        img[pred] = 0.5 * img[pred] + 0.5 * np.array([1.0, 0.0, 0.0])
        edge = s.gt_mask & ~(np.roll(s.gt_mask, 1, 0) & np.roll(s.gt_mask, 1, 1)
                             & np.roll(s.gt_mask, -1, 0) & np.roll(s.gt_mask, -1, 1))
        img[edge] = (0.0, 1.0, 0.0)
        write_ppm(out / f"overlay_{i:05d}.ppm", img)


def run_experiment(cfg: RunConfig, samples, out_dir=None) -> MetricReport:
    """Train on ``samples`` and score the trained model on the same samples."""
    model, _ = train(cfg, samples, out_dir)
    return evaluate_model(model, samples, out_dir)


# -- ablation matrix -----------------------------------------------------------

COMPONENT_ROWS = [
    ("baseline", {"bhfm.variant": "off", "mpg.enabled": "false", "loss.tbl": "0"}),
    ("+L_tbl", {"bhfm.variant": "off", "mpg.enabled": "false"}),
    ("+L_tbl+MPG", {"bhfm.variant": "off"}),
    ("+L_tbl+BHFM", {"mpg.enabled": "false"}),
    ("full", {}),
]
SETTING_ROWS = [
    ("MPG interaction", "w/o MHCA", {"mpg.use_mhca": "false"}),
    ("MPG interaction", "w MHCA", {}),
    ("BHFM structure", "Linear", {"bhfm.variant": "linear"}),
    ("BHFM structure", "Uni", {"bhfm.variant": "uni"}),
    ("BHFM structure", "Bi", {}),
    ("BHFM components", "w/o BC", {"bhfm.use_bc": "false"}),
    ("BHFM components", "w/o BL", {"bhfm.use_bl": "false"}),
    ("BHFM components", "w BC&BL", {}),
]


def ablation_rows() -> list[dict]:
    rows = [{"table": "components", "group": "components", "name": n, "overrides": o}
            for n, o in COMPONENT_ROWS]
    rows += [{"table": "settings", "group": g, "name": n, "overrides": o} for g, n, o in SETTING_ROWS]
    return rows


def cell_config(cfg: RunConfig, overrides: dict) -> RunConfig:
    budget = {"optim.steps": cfg["ablate.steps"], "optim.decay_last": cfg["ablate.decay_last"]}
    return cfg.with_overrides(list(budget.items()) + list(overrides.items()))


def ablate(cfg: RunConfig, samples, out_dir=None) -> list[dict]:
    results = []
    cache: dict[str, dict] = {}
    for row in ablation_rows():
        cell = dict(row)
        try:
            cell_cfg = cell_config(cfg, row["overrides"])
            key = cell_cfg.hash()
            if key not in cache:
                log.info("ablation cell %s (%s)", row["name"], key)
                cache[key] = run_experiment(cell_cfg, samples).to_dict()
            cell.update(status="ok", config_hash=key, metrics=cache[key],
                        echo={k: cell_cfg[k] for k in ("bhfm.variant", "bhfm.use_bc", "bhfm.use_bl",
                                                        "mpg.enabled", "mpg.use_mhca", "loss.tbl")})
        except Exception as err:  # a failed cell must not abort the matrix
            cell.update(status=f"failed: {err}", metrics=None)
        results.append(cell)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(results, indent=2) + "\n")
        (out / "ablation.txt").write_text(ablation_table(results))
    return results


def ablation_table(results) -> str:
    cols = ["pr@0.5", "pr@0.7", "pr@0.9", "miou", "oiou"]
    head = ["Pr@0.5", "Pr@0.7", "Pr@0.9", "mIoU", "oIoU"]

    def fmt(cell):
        if cell["metrics"] is None:
            return " ".join(f"{'-':>7}" for _ in cols) + f"  [{cell['status']}]"
        return " ".join(f"{cell['metrics'][c]:>7.2f}" for c in cols)

    lines = [f"{'Method':<14} {'L_tbl':>5} {'MPG':>4} {'BHFM':>5} " + " ".join(f"{h:>7}" for h in head)]
    for cell in results:
        if cell["table"] != "components":
            continue
        o = cell["overrides"]
        marks = ["" if o.get("loss.tbl") == "0" else "x",
                 "" if o.get("mpg.enabled") == "false" else "x",
                 "" if o.get("bhfm.variant") == "off" else "x"]
        lines.append(f"{cell['name']:<14} {marks[0]:>5} {marks[1]:>4} {marks[2]:>5} " + fmt(cell))
    lines.append("")
    lines.append(f"{'Setting':<14} " + " ".join(f"{h:>7}" for h in head))
    group = None
    for cell in results:
        if cell["table"] != "settings":
            continue
        if cell["group"] != group:
            group = cell["group"]
            lines.append(f"-- {group}")
        lines.append(f"{cell['name']:<14} " + fmt(cell))
    return "\n".join(lines) + "\n"
