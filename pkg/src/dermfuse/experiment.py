"""Config-driven experiment runner: per (backbone, fusion) pair, run k-fold
cross-validation with the standard training protocol and emit per-fold and
aggregated results, as machine CSV and a human table grouped by fusion kind
with the best mean per backbone bolded.

Config files are JSON with sections dataset/backbone/fusion/head/train/optim/
schedule; unknown keys are rejected, omitted keys take the protocol defaults
(150 epochs, batch 30, reducer 90, SGD 0.001/0.9/0.001, plateau 10/0.1/1e-6,
early stop 15, 5 folds).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .backbones import (
    TinyCnn,
    TinyCnnConfig,
    TinyDualVit,
    TinyDualVitConfig,
    TinyVit,
    TinyVitConfig,
)
from .data import (
    Dataset,
    MetadataEncoder,
    SIGNAL_MODES,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    stratified_kfold,
)
from .errors import ConfigError
from .fusion import (
    FUSION_KINDS,
    ConcatFusion,
    FusionModel,
    MatFusion,
    MetaBlockFusion,
    MetaNetFusion,
    ReducerHead,
)
from .optim import (
    EarlyStopper,
    EpochRecord,
    PlateauScheduler,
    SgdConfig,
    SplitData,
    TrainConfig,
    train_model,
)
from .tensor import no_grad
from . import tensor as ops

BACKBONE_KINDS = ("cnn", "vit", "dualvit")


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "synthetic"  # synthetic | files
    n: int = 600
    classes: int = 6
    image_size: int = 32
    mode: str = "both"
    delta: float = 3.0
    seed: int | None = None  # falls back to the run seed
    zero_metadata: bool = False
    csv: str | None = None
    schema: str | None = None
    images: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "files"):
            raise ConfigError(f"dataset.kind must be synthetic or files, got {self.kind!r}")
        if self.mode not in SIGNAL_MODES:
            raise ConfigError(f"dataset.mode must be one of {SIGNAL_MODES}, got {self.mode!r}")
        if self.kind == "files" and (self.csv is None or self.schema is None):
            raise ConfigError("dataset.kind=files requires dataset.csv and dataset.schema")


@dataclass(frozen=True)
class BackboneSection:
    kind: str = "vit"
    channels: tuple[int, ...] = (8, 16, 32)  # cnn
    kernel: int = 3  # cnn
    patch_size: int = 8  # vit, dualvit big branch
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    small_patch_size: int = 16  # dualvit second branch
    small_embed_dim: int = 16

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(
                f"backbone.kind must be one of {BACKBONE_KINDS}, got {self.kind!r}"
            )


@dataclass(frozen=True)
class FusionSection:
    kind: str = "concat"
    hidden_dim: int = 64  # metanet
    chunks: int = 8  # mat
    attn_dim: int = 32  # mat
    heads: int = 4  # mat

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ConfigError(
                f"fusion.kind must be one of {FUSION_KINDS}, got {self.kind!r}"
            )


@dataclass(frozen=True)
class HeadSection:
    reducer_dim: int = 90


@dataclass(frozen=True)
class TrainSection:
    max_epochs: int = 150
    batch_size: int = 30
    folds: int = 5
    monitor: str = "val_loss"

    def __post_init__(self):
        if self.monitor not in ("val_loss", "val_bcc"):
            raise ConfigError(f"train.monitor must be val_loss or val_bcc, got {self.monitor!r}")
        if self.folds < 2:
            raise ConfigError(f"train.folds must be >= 2, got {self.folds}")


@dataclass(frozen=True)
class OptimSection:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001


@dataclass(frozen=True)
class ScheduleSection:
    plateau_patience: int = 10
    factor: float = 0.1
    min_lr: float = 1e-6
    early_stop_patience: int = 15


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    head: HeadSection = field(default_factory=HeadSection)
    train: TrainSection = field(default_factory=TrainSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        canonical = json.dumps(_tuples_to_lists(self.to_dict()), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


_SECTIONS = {
    "dataset": DatasetSection,
    "backbone": BackboneSection,
    "fusion": FusionSection,
    "head": HeadSection,
    "train": TrainSection,
    "optim": OptimSection,
    "schedule": ScheduleSection,
}


def _build_section(cls, payload: dict, prefix: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{prefix}: expected an object, got {type(payload).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in known:
            raise ConfigError(
                f"unknown key {prefix}.{key}; valid keys: {sorted(known)}"
            )
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    kwargs = {}
    for key, value in payload.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"seed must be an integer, got {value!r}")
            kwargs["seed"] = value
        elif key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            raise ConfigError(
                f"unknown key {key}; valid keys: {['seed', *_SECTIONS]}"
            )
    return ExperimentConfig(**kwargs)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(_tuples_to_lists(cfg.to_dict()), indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# building blocks from config
# ---------------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> Dataset:
    ds_cfg = cfg.dataset
    if ds_cfg.kind == "files":
        return load_dataset(ds_cfg.csv, ds_cfg.schema, ds_cfg.images)
    seed = ds_cfg.seed if ds_cfg.seed is not None else cfg.seed
    return generate_synthetic(SyntheticSpec(
        n=ds_cfg.n, num_classes=ds_cfg.classes, image_size=ds_cfg.image_size,
        mode=ds_cfg.mode, delta=ds_cfg.delta, seed=seed,
    ))


def build_backbone(cfg: BackboneSection, image_size: int, rng: np.random.Generator):
    if cfg.kind == "cnn":
        return TinyCnn(TinyCnnConfig(channels=tuple(cfg.channels), kernel=cfg.kernel), rng=rng)
    if cfg.kind == "vit":
        return TinyVit(TinyVitConfig(cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.heads),
                       image_size=image_size, rng=rng)
    return TinyDualVit(TinyDualVitConfig(
        big=TinyVitConfig(cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.heads),
        small=TinyVitConfig(cfg.small_patch_size, cfg.small_embed_dim, cfg.depth, cfg.heads),
    ), image_size=image_size, rng=rng)


def build_fusion(cfg: FusionSection, image_dim: int, meta_dim: int, rng: np.random.Generator):
    if cfg.kind == "concat":
        return ConcatFusion(image_dim, meta_dim)
    if cfg.kind == "metablock":
        return MetaBlockFusion(image_dim, meta_dim, rng=rng)
    if cfg.kind == "metanet":
        return MetaNetFusion(image_dim, meta_dim, hidden_dim=cfg.hidden_dim, rng=rng)
    return MatFusion(image_dim, meta_dim, chunks=cfg.chunks, attn_dim=cfg.attn_dim,
                     heads=cfg.heads, rng=rng)


def build_model(cfg: ExperimentConfig, meta_dim: int, num_classes: int, seed: int) -> FusionModel:
    rng = np.random.default_rng(seed)
    backbone = build_backbone(cfg.backbone, cfg.dataset.image_size, rng)
    fusion = build_fusion(cfg.fusion, backbone.feature_dim, meta_dim, rng)
    head = ReducerHead(fusion.output_dim, num_classes,
                       reducer_dim=cfg.head.reducer_dim, rng=rng)
    return FusionModel(backbone, fusion, head)


# ---------------------------------------------------------------------------
# running experiments
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    bcc: float
    auc: float
    history: list[EpochRecord]
    seconds: float


@dataclass
class RunResult:
    config: ExperimentConfig
    digest: str
    folds: list[FoldResult]
    seconds: float

    @property
    def report(self) -> metrics.MetricsReport:
        return metrics.MetricsReport(
            bcc_per_fold=tuple(f.bcc for f in self.folds),
            auc_per_fold=tuple(f.auc for f in self.folds),
        )

    def to_dict(self) -> dict:
        bcc_mean, bcc_std = self.report.bcc
        auc_mean, auc_std = self.report.auc
        return {
            "digest": self.digest,
            "config": _tuples_to_lists(self.config.to_dict()),
            "folds": [
                {
                    "fold": f.fold,
                    "bcc": f.bcc,
                    "auc": f.auc,
                    "epochs": len(f.history),
                    "history": [dataclasses.asdict(r) for r in f.history],
                }
                for f in self.folds
            ],
            "aggregate": {"bcc_mean": bcc_mean, "bcc_std": bcc_std,
                          "auc_mean": auc_mean, "auc_std": auc_std},
        }


def _fold_splits(dataset: Dataset, cfg: ExperimentConfig, train_idx, val_idx):
    encoder = MetadataEncoder(dataset.schema).fit(dataset, train_idx)
    meta_train = encoder.transform(dataset, train_idx)
    meta_val = encoder.transform(dataset, val_idx)
    if cfg.dataset.zero_metadata:
        meta_train = np.zeros_like(meta_train)
        meta_val = np.zeros_like(meta_val)
    train = SplitData(dataset.images[train_idx], meta_train, dataset.labels[train_idx])
    val = SplitData(dataset.images[val_idx], meta_val, dataset.labels[val_idx])
    return train, val, meta_train.shape[1]


def run_fold(cfg: ExperimentConfig, dataset: Dataset, plan, fold: int) -> FoldResult:
    start = time.perf_counter()
    train_idx = plan.train_indices(fold)
    val_idx = plan.val_indices(fold)
    train, val, meta_dim = _fold_splits(dataset, cfg, train_idx, val_idx)
    num_classes = dataset.num_classes
    model = build_model(cfg, meta_dim, num_classes, seed=cfg.seed + fold)
    mode = "min" if cfg.train.monitor == "val_loss" else "max"
    history = train_model(
        model, train, val,
        TrainConfig(max_epochs=cfg.train.max_epochs, batch_size=cfg.train.batch_size,
                    seed=cfg.seed + fold, monitor=cfg.train.monitor),
        SgdConfig(lr=cfg.optim.lr, momentum=cfg.optim.momentum,
                  weight_decay=cfg.optim.weight_decay),
        PlateauScheduler(patience=cfg.schedule.plateau_patience, factor=cfg.schedule.factor,
                         min_lr=cfg.schedule.min_lr, mode=mode),
        EarlyStopper(patience=cfg.schedule.early_stop_patience, mode=mode),
        num_classes=num_classes,
    )
    preds, probs = predict(model, val)
    bcc = metrics.balanced_accuracy(val.labels, preds, num_classes)
    auc = metrics.roc_auc_ovr_macro(val.labels, probs)
    return FoldResult(fold=fold, bcc=bcc, auc=auc, history=history,
                      seconds=time.perf_counter() - start)


def predict(model, data: SplitData, batch_size: int = 256):
    """Class predictions and softmax probabilities over a split."""
    preds = np.empty(len(data), dtype=int)
    probs = np.empty((len(data), model.head.num_classes))
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            imgs, meta, _ = data.batch(idx)
            logits = model(imgs, meta)
            probs[idx] = ops.softmax(logits, axis=1).data
            preds[idx] = logits.data.argmax(axis=1)
    return preds, probs


def run_experiment(cfg: ExperimentConfig, out_dir=None, parallel_folds: int = 1) -> RunResult:
    """Build the fold plan, train one fresh model per fold (seed = run seed +
    fold index), and aggregate held-out metrics. With ``out_dir`` set, the
    resolved config, per-fold CSV and a full JSON result are written there;
    a fold fault persists the completed folds before propagating."""
    start = time.perf_counter()
    dataset = build_dataset(cfg)
    plan = stratified_kfold(dataset.labels, k=cfg.train.folds, seed=cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(serialize_config(cfg), encoding="utf-8")

    folds: list[FoldResult] = []
    try:
        if parallel_folds > 1:
            with ThreadPoolExecutor(max_workers=parallel_folds) as pool:
                futures = [pool.submit(run_fold, cfg, dataset, plan, f)
                           for f in range(cfg.train.folds)]
                folds = [fut.result() for fut in futures]
        else:
            for f in range(cfg.train.folds):
                folds.append(run_fold(cfg, dataset, plan, f))
    except Exception:
        if out_dir is not None and folds:
            partial = RunResult(cfg, cfg.digest(), folds, time.perf_counter() - start)
            _write_partial(partial, out_dir)
        raise

    result = RunResult(cfg, cfg.digest(), folds, time.perf_counter() - start)
    if out_dir is not None:
        write_result_files(result, out_dir)
    return result


def _write_partial(result: RunResult, out_dir: Path) -> None:
    rows = machine_csv_rows([result], include_aggregate=False)
    (out_dir / "results.partial.csv").write_text(render_csv(rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# report writing
# ---------------------------------------------------------------------------

CSV_HEADER = "model,fusion,fold,bcc,auc"

FUSION_HEADINGS = {
    "concat": "Concatenation Fusion",
    "mat": "MAT Fusion",
    "metablock": "MetaBlock Fusion",
    "metanet": "MetaNet Fusion",
}


def machine_csv_rows(results: list[RunResult], include_aggregate: bool = True) -> list[list[str]]:
    rows = []
    for res in results:
        model = res.config.backbone.kind
        fusion = res.config.fusion.kind
        for f in res.folds:
            rows.append([model, fusion, str(f.fold), repr(f.bcc), repr(f.auc)])
        if include_aggregate:
            bcc_mean, bcc_std = res.report.bcc
            auc_mean, auc_std = res.report.auc
            rows.append([model, fusion, "mean", repr(bcc_mean), repr(auc_mean)])
            rows.append([model, fusion, "std", repr(bcc_std), repr(auc_std)])
    return rows


def render_csv(rows: list[list[str]]) -> str:
    return "\n".join([CSV_HEADER] + [",".join(r) for r in rows]) + "\n"


def render_table(results: list[RunResult]) -> str:
    """Fusion-kind sections with one row per backbone; the best mean per
    backbone for each metric carries ** marks."""
    cells: dict[tuple[str, str], tuple[str, str, float, float]] = {}
    for res in results:
        model = res.config.backbone.kind
        fusion = res.config.fusion.kind
        bcc_mean, bcc_std = res.report.bcc
        auc_mean, auc_std = res.report.auc
        cells[(fusion, model)] = (
            metrics.format_mean_std(bcc_mean, bcc_std),
            metrics.format_mean_std(auc_mean, auc_std),
            bcc_mean, auc_mean,
        )

    models = sorted({m for _, m in cells})
    fusion_order = list(FUSION_HEADINGS)

    def best_fusion(model: str, metric_idx: int) -> str:
        # exactly one bold per metric per backbone: ties break on section order
        candidates = [(fu, v[metric_idx]) for (fu, mo), v in cells.items() if mo == model]
        candidates.sort(key=lambda t: (-t[1], fusion_order.index(t[0])))
        return candidates[0][0]

    bold_bcc = {m: best_fusion(m, 2) for m in models}
    bold_auc = {m: best_fusion(m, 3) for m in models}

    width = 22
    lines = [f"{'Model':<12} | {'BCC':<{width}} | {'AUC':<{width}}"]
    lines.append("-" * len(lines[0]))
    for fusion in FUSION_HEADINGS:
        section = [(mo, v) for (fu, mo), v in cells.items() if fu == fusion]
        if not section:
            continue
        lines.append(FUSION_HEADINGS[fusion])
        for model, (bcc_s, auc_s, _, _) in sorted(section):
            bcc_cell = f"**{bcc_s}**" if bold_bcc[model] == fusion else bcc_s
            auc_cell = f"**{auc_s}**" if bold_auc[model] == fusion else auc_s
            lines.append(f"{model:<12} | {bcc_cell:<{width}} | {auc_cell:<{width}}")
    return "\n".join(lines) + "\n"


def write_result_files(result: RunResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(
        render_csv(machine_csv_rows([result])), encoding="utf-8"
    )
    (out_dir / "result.json").write_text(
        json.dumps(result.to_dict(), indent=1, sort_keys=True), encoding="utf-8"
    )


def write_report(results: list[RunResult], out_dir) -> None:
    """Combined machine CSV plus the human table for a list of runs."""
    if not results:
        raise ConfigError("write_report needs at least one result")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(
        render_csv(machine_csv_rows(results)), encoding="utf-8"
    )
    (out_dir / "report.txt").write_text(render_table(results), encoding="utf-8")


def load_results_csv(path) -> list[dict]:
    """Parse a machine CSV back into row dicts (floats for bcc/auc)."""
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigError(f"{path}: expected header {CSV_HEADER!r}")
    rows = []
    for line in lines[1:]:
        model, fusion, fold, bcc, auc = line.split(",")
        rows.append({"model": model, "fusion": fusion, "fold": fold,
                     "bcc": float(bcc), "auc": float(auc)})
    return rows
