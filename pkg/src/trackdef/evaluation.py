"""Benchmark protocols and metrics for clean, attacked, and defended runs.

One-pass evaluation (OPE) tracks each sequence once from ground-truth
initialization. The reset protocol re-initializes from ground truth five
frames after a tracking failure and summarizes accuracy, failure rate, and a
simplified expected-overlap score. Attack and defense stages are applied
per-frame through tracking hooks and individually timed.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .attacks import AttackConfig, IoUAttackCarry, gradient_attack, iou_blackbox_attack
from .data import (
    Sequence,
    SyntheticConfig,
    load_otb_sequence,
    make_dataset,
)
from .defense import DefenseStack, DeploymentPattern, defend
from .errors import ConfigError
from .geometry import Box, center_error, iou, make_label_set, norm_center_error
from .patches import to_bchw
from .tracker import (
    ScoreMaps,
    SiamTracker,
    StageTimer,
    TrackRun,
    crop_search,
    crop_template,
    forward_pair,
    load_tracker_checkpoint,
    select_box,
)

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 21)
PRECISION_TAU = 20.0


# ---------------------------------------------------------------------------
# run specification


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    cfg: SyntheticConfig = field(default_factory=SyntheticConfig)
    n_sequences: int = 4
    seed: int = 1000

    def load(self) -> list[Sequence]:
        return make_dataset(self.cfg, self.n_sequences, self.seed)

    def dataset_id(self) -> str:
        import hashlib
        import json
        from dataclasses import asdict

        blob = json.dumps(
            {"cfg": asdict(self.cfg), "n": self.n_sequences, "seed": self.seed},
            sort_keys=True,
        )
        return "synthetic-" + hashlib.sha256(blob.encode()).hexdigest()[:10]


@dataclass(frozen=True)
class OtbDatasetSpec:
    root: str
    sequences: tuple[str, ...] | None = None

    def load(self) -> list[Sequence]:
        root = Path(self.root)
        if not root.is_dir():
            raise ConfigError(f"dataset root {root} does not exist")
        names = self.sequences or tuple(
            sorted(p.name for p in root.iterdir() if (p / "img").is_dir())
        )
        if not names:
            raise ConfigError(f"no OTB-format sequences under {root}")
        return [load_otb_sequence(root / name) for name in names]

    def dataset_id(self) -> str:
        names = ",".join(self.sequences) if self.sequences else "*"
        return f"otb-{Path(self.root).name}-{names}"


@dataclass(frozen=True)
class DefenseSelection:
    pattern: DeploymentPattern
    template_checkpoint: str | None = None
    search_checkpoint: str | None = None

    def load(self) -> DefenseStack:
        from .advtrain import load_defense_checkpoint

        stack = DefenseStack()
        if self.pattern.uses_template:
            if self.template_checkpoint is None:
                raise ConfigError("pattern needs a template defense checkpoint")
            stack.template = load_defense_checkpoint(self.template_checkpoint, "template")
        if self.pattern.uses_search:
            if self.search_checkpoint is None:
                raise ConfigError("pattern needs a search defense checkpoint")
            stack.search = load_defense_checkpoint(self.search_checkpoint, "search")
        return stack


@dataclass(frozen=True)
class RunSpec:
    tracker_checkpoint: str
    dataset: SyntheticDatasetSpec | OtbDatasetSpec
    defense: DefenseSelection | None = None
    attack: AttackConfig | None = None
    seed: int = 0
    jobs: int = 1
    dump_patches: str | None = None

    def __post_init__(self) -> None:
        if self.attack is not None and self.attack.adaptive and self.defense is None:
            raise ConfigError("an adaptive attack requires a defense pattern")


# ---------------------------------------------------------------------------
# per-sequence outcome


@dataclass
class SequenceResult:
    name: str
    n_frames: int
    iou: np.ndarray
    center_err: np.ndarray
    norm_center_err: np.ndarray
    failures: tuple[int, ...] = ()
    counted: np.ndarray | None = None
    times: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.iou) != self.n_frames:
            raise ValueError("trace length must equal the sequence length")


def ope_result_from_boxes(
    seq: Sequence, boxes: list[Box], timer: StageTimer | None = None
) -> SequenceResult:
    """Score a per-frame prediction list against a sequence's ground truth."""
    if len(boxes) != len(seq):
        raise ValueError(f"{len(boxes)} predictions for {len(seq)} frames")
    ious = np.array([iou(b, g) for b, g in zip(boxes, seq.gt)])
    cerr = np.array([center_error(b, g) for b, g in zip(boxes, seq.gt)])
    nerr = np.array([norm_center_error(b, g) for b, g in zip(boxes, seq.gt)])
    times = {}
    if timer is not None:
        times = {
            stage: timer.stage_array(stage) for stage in ("tracker", "defense", "attack")
        }
    return SequenceResult(
        name=seq.name,
        n_frames=len(seq),
        iou=ious,
        center_err=cerr,
        norm_center_err=nerr,
        times=times,
    )


# ---------------------------------------------------------------------------
# attack / defense hooks


class _PipelineHooks:
    """Builds the per-sequence template and search pre-processing hooks.

    Stage order per frame is crop -> attack -> defense -> tracker. The
    non-adaptive attacks see the bare tracker (original template, no defense
    in the gradient or query path); adaptive attacks see the full deployed
    composition.
    """

    def __init__(
        self,
        model: SiamTracker,
        seq: Sequence,
        stack: DefenseStack | None,
        pattern: DeploymentPattern | None,
        attack: AttackConfig | None,
        seed: int,
        timer: StageTimer,
        frame_offset: int = 0,
        dump_dir: Path | None = None,
    ):
        self.model = model
        self.seq = seq
        self.stack = stack
        self.pattern = pattern
        self.attack = attack
        self.timer = timer
        self.offset = frame_offset
        self.dump_dir = dump_dir
        self.rng = np.random.default_rng([max(seed, 0), frame_offset])
        self.seed = seed
        self.run: TrackRun | None = None
        self.template_raw: np.ndarray | None = None
        self._zfeat_raw = None
        self.carry: IoUAttackCarry | None = None

    # -- template branch

    def template_pre(self, patch: np.ndarray) -> np.ndarray:
        out = patch
        if self.attack is not None and self.attack.kind in ("fgsm", "pgd"):
            if self.attack.target_branch in ("template", "both"):
                out = self._attack_template(out)
        self.template_raw = out
        if self.pattern is not None and self.pattern.uses_template:
            t0 = time.perf_counter()
            out = defend(self.stack.template, out)
            self.timer.add("defense", (time.perf_counter() - t0) * 1000.0)
        return out

    def _attack_template(self, z_patch: np.ndarray) -> np.ndarray:
        # the template is attacked once, against the first tracked pair
        seq, model = self.seq, self.model
        j = min(self.offset + 1, len(seq) - 1)
        x, mapping = crop_search(
            seq.frames[j], seq.gt[self.offset], model.cfg.search_size, model.cfg.template_size
        )
        labels = make_label_set(
            model.anchor_grid, mapping.to_patch_box(seq.gt[j]),
            model.cfg.pos_iou, model.cfg.neg_iou,
        )
        cfg = replace(self.attack, seed=self.attack.seed + self.offset)
        t0 = time.perf_counter()
        z_adv, _ = gradient_attack(
            model, self._defense_for_attack(), z_patch, x, labels, cfg
        )
        self.timer.add("attack", (time.perf_counter() - t0) * 1000.0)
        return z_adv

    def _defense_for_attack(self):
        if self.attack is not None and self.attack.adaptive:
            return (self.stack, self.pattern)
        return None

    def _zfeat_for_query(self):
        # bare-tracker template features for non-adaptive black-box queries
        if self._zfeat_raw is None:
            with torch.no_grad():
                self._zfeat_raw = self.model.template_features(
                    to_bchw(self.template_raw, self.model.cfg.torch_dtype)
                )
        return self._zfeat_raw

    # -- search branch

    def search_pre(self, patch: np.ndarray, ctx) -> np.ndarray:
        out = patch
        if self.attack is not None:
            out = self._attack_search(out, ctx)
        if self.pattern is not None and self.pattern.uses_search:
            t0 = time.perf_counter()
            out = defend(self.stack.search, out)
            self.timer.add("defense", (time.perf_counter() - t0) * 1000.0)
        return out

    def _attack_search(self, patch: np.ndarray, ctx) -> np.ndarray:
        cfg = self.attack
        frame_idx = self.offset + ctx.index
        t0 = time.perf_counter()
        if cfg.kind in ("fgsm", "pgd"):
            if cfg.target_branch == "template":
                adv = patch
            else:
                labels = make_label_set(
                    self.model.anchor_grid,
                    ctx.mapping.to_patch_box(self.seq.gt[frame_idx]),
                    self.model.cfg.pos_iou,
                    self.model.cfg.neg_iou,
                )
                _, adv = gradient_attack(
                    self.model,
                    self._defense_for_attack(),
                    self.template_raw,
                    patch,
                    labels,
                    replace(cfg, seed=cfg.seed + frame_idx, target_branch="search"),
                )
        else:
            query = self._blackbox_query(ctx)
            adv, self.carry = iou_blackbox_attack(
                query, patch, ctx.prev_box, cfg, self.rng, self.carry
            )
        self.timer.add("attack", (time.perf_counter() - t0) * 1000.0)
        if self.dump_dir is not None:
            _dump_patch_pair(self.dump_dir, self.seq.name, frame_idx, patch, adv)
        return adv

    def _blackbox_query(self, ctx):
        run = self.run
        if self.attack.adaptive:

            def query(patch: np.ndarray) -> Box:
                if self.pattern is not None and self.pattern.uses_search:
                    patch = defend(self.stack.search, patch)
                return run.predict(patch, ctx.mapping)

        else:
            zfeat = self._zfeat_for_query()

            def query(patch: np.ndarray) -> Box:
                with torch.no_grad():
                    cls, reg = self.model.search_maps(
                        zfeat, to_bchw(patch, self.model.cfg.torch_dtype)
                    )
                return select_box(
                    ScoreMaps(cls=cls[0], reg=reg[0]),
                    self.model.anchor_grid,
                    run.state,
                    ctx.mapping,
                )

        return query


def _dump_patch_pair(dump_dir: Path, name: str, index: int, clean, adv) -> None:
    dump_dir.mkdir(parents=True, exist_ok=True)
    for tag, img in (("orig", clean), ("adv", adv)):
        path = dump_dir / f"{name}_f{index:04d}_{tag}.png"
        arr = np.round(np.asarray(img, dtype=np.float64) * 65535.0).astype(np.uint16)
        cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR))


# ---------------------------------------------------------------------------
# protocols


def evaluate_ope(
    model: SiamTracker,
    sequences: list[Sequence],
    stack: DefenseStack | None = None,
    pattern: DeploymentPattern | None = None,
    attack: AttackConfig | None = None,
    seed: int = 0,
    jobs: int = 1,
    dump_patches=None,
) -> list[SequenceResult]:
    """Track each sequence once from its ground-truth initialization."""
    _check_stages(stack, pattern, attack)
    dump_dir = Path(dump_patches) if dump_patches else None

    def one(idx_seq):
        idx, seq = idx_seq
        timer = StageTimer()
        hooks = _PipelineHooks(
            model, seq, stack, pattern, attack, seed + idx, timer, dump_dir=dump_dir
        )
        run = TrackRun(
            model, seq.frames[0], seq.gt[0], template_pre=hooks.template_pre, timer=timer
        )
        hooks.run = run
        boxes = [seq.gt[0]]
        for frame in seq.frames[1:]:
            boxes.append(run.step(frame, search_pre=hooks.search_pre))
        return ope_result_from_boxes(seq, boxes, timer)

    items = list(enumerate(sequences))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, items))
    return [one(item) for item in items]


def reset_trace(
    seq: Sequence, segment_boxes_fn, reinit_gap: int = 5, burn_in: int = 10
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Drive the reset protocol over one sequence.

    `segment_boxes_fn(start)` must return an iterator of predicted boxes for
    frames start+1, start+2, ...; it is consumed only until the first failure
    (IoU exactly zero). Returns the per-frame overlap trace (zeros during
    failure gaps), the mask of frames that count toward accuracy, and the
    failure frame indices.
    """
    n = len(seq)
    trace = np.zeros(n, dtype=np.float64)
    counted = np.zeros(n, dtype=bool)
    failures: list[int] = []
    start, reinit = 0, False
    while start < n:
        trace[start] = 1.0
        counted[start] = not reinit
        if reinit:
            counted[start : min(n, start + burn_in)] = False
        fail_at = None
        boxes = segment_boxes_fn(start)
        for i, box in zip(range(start + 1, n), boxes):
            ov = iou(box, seq.gt[i])
            trace[i] = ov
            if not (reinit and i < start + burn_in):
                counted[i] = True
            if ov == 0.0:
                fail_at = i
                break
        if fail_at is None:
            break
        failures.append(fail_at)
        counted[fail_at] = False
        start, reinit = fail_at + reinit_gap, True
    return trace, counted, failures


@dataclass
class ResetOutcome:
    accuracy: float
    robustness: float
    eao_s: float
    results: list[SequenceResult]


def evaluate_reset(
    model: SiamTracker,
    sequences: list[Sequence],
    stack: DefenseStack | None = None,
    pattern: DeploymentPattern | None = None,
    attack: AttackConfig | None = None,
    seed: int = 0,
    reinit_gap: int = 5,
    burn_in: int = 10,
) -> ResetOutcome:
    """Reset-protocol evaluation: accuracy, failures per sequence, and the
    simplified expected-overlap score."""
    _check_stages(stack, pattern, attack)
    results = []
    for idx, seq in enumerate(sequences):
        timer = StageTimer()

        def segment(start: int):
            hooks = _PipelineHooks(
                model, seq, stack, pattern, attack, seed + idx, timer, frame_offset=start
            )
            run = TrackRun(
                model, seq.frames[start], seq.gt[start],
                template_pre=hooks.template_pre, timer=timer,
            )
            hooks.run = run
            for i in range(start + 1, len(seq)):
                yield run.step(seq.frames[i], search_pre=hooks.search_pre)

        trace, counted, failures = reset_trace(seq, segment, reinit_gap, burn_in)
        results.append(
            SequenceResult(
                name=seq.name,
                n_frames=len(seq),
                iou=trace,
                center_err=np.zeros(len(seq)),
                norm_center_err=np.zeros(len(seq)),
                failures=tuple(failures),
                counted=counted,
                times={
                    stage: timer.stage_array(stage)
                    for stage in ("tracker", "defense", "attack")
                },
            )
        )
    return ResetOutcome(
        accuracy=reset_accuracy(results),
        robustness=reset_robustness(results),
        eao_s=reset_eao(results),
        results=results,
    )


def _check_stages(stack, pattern, attack) -> None:
    if (stack is None) != (pattern is None):
        raise ValueError("defense stack and deployment pattern must be given together")
    if stack is not None:
        stack.require(pattern)
    if attack is not None and attack.adaptive and stack is None:
        raise ValueError("an adaptive attack requires a defense to adapt to")


# ---------------------------------------------------------------------------
# metrics


def _pool_iou(results: list[SequenceResult]) -> np.ndarray:
    if not results:
        raise ValueError("no sequence results")
    return np.concatenate([r.iou for r in results])


def success_auc(results: list[SequenceResult]) -> float:
    """Area under the success curve: mean over 21 overlap thresholds of the
    fraction of frames with IoU strictly above the threshold."""
    ious = _pool_iou(results)
    return float(np.mean([(ious > t).mean() for t in SUCCESS_THRESHOLDS]))


def precision_at(results: list[SequenceResult], tau: float = PRECISION_TAU) -> float:
    """Fraction of frames with center error within `tau` pixels."""
    err = np.concatenate([r.center_err for r in results])
    return float((err <= tau).mean())


def norm_precision(results: list[SequenceResult]) -> float:
    """Mean over 21 size-normalized thresholds of the fraction of frames with
    normalized center error within the threshold."""
    err = np.concatenate([r.norm_center_err for r in results])
    return float(np.mean([(err <= t).mean() for t in NORM_PRECISION_THRESHOLDS]))


def reset_accuracy(results: list[SequenceResult]) -> float:
    vals = np.concatenate(
        [r.iou[r.counted] for r in results if r.counted is not None]
    )
    return float(vals.mean()) if vals.size else 0.0


def reset_robustness(results: list[SequenceResult]) -> float:
    return float(np.mean([len(r.failures) for r in results]))


def reset_eao(results: list[SequenceResult]) -> float:
    return float(np.mean([r.iou.sum() / r.n_frames for r in results]))


def ope_metrics(results: list[SequenceResult]) -> dict[str, float]:
    return {
        "success": success_auc(results),
        "precision": precision_at(results),
        "norm_precision": norm_precision(results),
    }


# ---------------------------------------------------------------------------
# spec-driven entry points


def run_ope(spec: RunSpec) -> list[SequenceResult]:
    """Load everything a RunSpec references and run the OPE protocol."""
    model, stack, pattern, sequences = _materialize(spec)
    return evaluate_ope(
        model,
        sequences,
        stack=stack,
        pattern=pattern,
        attack=spec.attack,
        seed=spec.seed,
        jobs=spec.jobs,
        dump_patches=spec.dump_patches,
    )


def run_reset_protocol(spec: RunSpec) -> tuple[float, float, float]:
    """Reset-protocol metrics (accuracy, robustness, eao_s) for a RunSpec."""
    model, stack, pattern, sequences = _materialize(spec)
    outcome = evaluate_reset(
        model, sequences, stack=stack, pattern=pattern, attack=spec.attack, seed=spec.seed
    )
    return outcome.accuracy, outcome.robustness, outcome.eao_s


def _materialize(spec: RunSpec):
    if not Path(spec.tracker_checkpoint).is_file():
        raise ConfigError(f"tracker checkpoint {spec.tracker_checkpoint} does not exist")
    model = load_tracker_checkpoint(spec.tracker_checkpoint)
    stack = pattern = None
    if spec.defense is not None:
        pattern = spec.defense.pattern
        stack = spec.defense.load()
    sequences = spec.dataset.load()
    return model, stack, pattern, sequences


# ---------------------------------------------------------------------------
# score-map dumps


def foreground_score_image(maps: ScoreMaps) -> np.ndarray:
    """Max-over-anchors foreground score per cell, min-max normalized to [0, 1]."""
    from .losses import _anchor_logits

    logits = _anchor_logits(maps.cls.detach())
    prob = torch.softmax(logits, dim=1)[:, 1]
    k = maps.cls.shape[0] // 2
    h, w = maps.cls.shape[1:]
    img = prob.reshape(k, h, w).max(dim=0).values.cpu().numpy()
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        return ((img - lo) / (hi - lo)).astype(np.float64)
    return np.ones_like(img, dtype=np.float64)


def dump_score_maps(spec: RunSpec, frame_indices: list[int], out_dir) -> list[Path]:
    """Write clean / attacked / defended foreground-score images for selected
    frames of the first sequence; three grayscale files per frame index."""
    model, stack, pattern, sequences = _materialize(spec)
    seq = sequences[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = model.anchor_grid
    written: list[Path] = []
    z = crop_template(seq.frames[0], seq.gt[0], model.cfg.template_size)
    for idx in frame_indices:
        if not (0 <= idx < len(seq)):
            raise ValueError(f"frame index {idx} out of range for {seq.name}")
        prev = seq.gt[max(idx - 1, 0)]
        x, mapping = crop_search(
            seq.frames[idx], prev, model.cfg.search_size, model.cfg.template_size
        )
        labels = make_label_set(
            grid, mapping.to_patch_box(seq.gt[idx]), model.cfg.pos_iou, model.cfg.neg_iou
        )
        variants: dict[str, tuple[np.ndarray, np.ndarray]] = {"clean": (z, x)}
        z_atk, x_atk = z, x
        if spec.attack is not None and spec.attack.kind in ("fgsm", "pgd"):
            defense_arg = (stack, pattern) if spec.attack.adaptive else None
            z_atk, x_atk = gradient_attack(model, defense_arg, z, x, labels, spec.attack)
            variants["attacked"] = (z_atk, x_atk)
        else:
            variants["attacked"] = (z, x)
        z_def, x_def = z_atk, x_atk
        if stack is not None:
            if pattern.uses_template:
                z_def = defend(stack.template, z_def)
            if pattern.uses_search:
                x_def = defend(stack.search, x_def)
        variants["defended"] = (z_def, x_def)
        for tag, (zv, xv) in variants.items():
            img = foreground_score_image(forward_pair(model, zv, xv))
            path = out_dir / f"{seq.name}_f{idx:04d}_{tag}.png"
            cv2.imwrite(str(path), np.round(img * 255.0).astype(np.uint8))
            written.append(path)
    return written
