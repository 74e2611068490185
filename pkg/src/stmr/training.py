"""Training loop, checkpoints, evaluation and the ablation runner."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import losses
from .hierarchy import MeshHierarchy, build_hierarchy
from .mesh_core import Mesh, face_unit_normals, save_obj
from .metrics import METRIC_KEYS, metrics_report, pck_auc, point_errors
from .model import STMR, ModelConfig, build_ppvl_matrix, toy_config
from .synthetic import HandTemplate, generate_dataset, generate_template, stack_samples
from .tensor import Adam, Tensor, load_records, no_grad, save_records, step_lr

LOG_COLUMNS = ("epoch", "lr", "loss") + losses.TERMS + ("val_loss", "val_pa_mpjpe", "val_pa_mpvpe", "val_auc_3d")


class TrainingDiverged(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a training run needs besides the model architecture.

    ``model`` holds overrides applied on top of the toy (``toy=True``) or
    full-size model defaults; ``model_config_path`` replaces both.
    """

    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    decay_epoch: int | None = 30
    normal_weight: float = 0.05
    edge_weight: float = 0.5
    n_train: int = 64
    n_val: int = 16
    paired: bool = False
    seed: int = 0
    template_seed: int = 0
    hierarchy_path: str | None = None
    model_config_path: str | None = None
    toy: bool = True
    model: dict = field(default_factory=dict)
    eval_every: int = 1
    checkpoint_every: int = 0
    fingertip_neighbors: int = 2

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.n_train < 1:
            raise ValueError("epochs, batch_size and n_train must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(normal=self.normal_weight, edge=self.edge_weight)

    def model_config(self) -> ModelConfig:
        if self.model_config_path:
            cfg = ModelConfig.load(self.model_config_path)
            return replace(cfg, **self.model) if self.model else cfg
        return toy_config(**self.model) if self.toy else ModelConfig(**self.model)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def overfit_config(seed: int = 0, **overrides) -> RunConfig:
    """The desk-scale overfit schedule: 16 samples, one full batch per step, 600 steps."""
    base = dict(epochs=600, batch_size=16, n_train=16, n_val=16, lr=1e-3, decay_epoch=450, eval_every=0,
                seed=seed)
    base.update(overrides)
    return RunConfig(**base)


# --- setup -------------------------------------------------------------------


def fingertip_neighbors(template: HandTemplate, hierarchy: MeshHierarchy, k: int = 2) -> list[list[int]]:
    """The ``k`` coarsest-level vertices nearest each fingertip marker."""
    coarse = template.mesh.vertices[hierarchy.coarse_index_map()]
    tips = template.mesh.vertices[template.fingertip_vertices()]
    return [np.argsort(np.linalg.norm(coarse - t, axis=1), kind="stable")[:k].tolist() for t in tips]


def _as_float32(arrays: dict, scale: float) -> dict:
    out = {}
    for key, val in arrays.items():
        if key.startswith("meshes"):
            val = val / scale
        out[key] = np.asarray(val, dtype=np.float32)
    return out


def face_normals_batch(faces: np.ndarray, meshes: np.ndarray) -> np.ndarray:
    return np.stack([face_unit_normals(Mesh(v, faces)) for v in meshes]).astype(np.float32)


@dataclass
class Setup:
    run: RunConfig
    model_cfg: ModelConfig
    template: HandTemplate
    hierarchy: MeshHierarchy
    train: dict
    val: dict
    init_seed: np.random.SeedSequence
    shuffle_seed: np.random.SeedSequence

    @property
    def faces(self) -> np.ndarray:
        return self.template.mesh.faces

    def build_model(self) -> STMR:
        lift = None
        if self.model_cfg.use_ppvl:
            lift = build_ppvl_matrix(self.template.skin_weights, self.hierarchy.coarse_index_map(),
                                     fingertip_neighbors(self.template, self.hierarchy, self.run.fingertip_neighbors))
        return STMR(self.model_cfg, self.hierarchy, lift, np.random.default_rng(self.init_seed))


def load_or_build_hierarchy(run: RunConfig, template: HandTemplate, K: int) -> MeshHierarchy:
    if run.hierarchy_path:
        h = MeshHierarchy.load(run.hierarchy_path)
        if h.levels[0].n_vertices != template.mesh.n_vertices or h.K != K:
            raise ConfigMismatch(f"hierarchy at {run.hierarchy_path} has counts {h.counts} and K={h.K}")
        return h
    return build_hierarchy(template.mesh, K=K)


def prepare(run: RunConfig, hierarchy: MeshHierarchy | None = None) -> Setup:
    """Template, hierarchy and datasets for ``run``, all derived from its seeds."""
    cfg = run.model_config()
    template = generate_template(run.template_seed)
    if hierarchy is None:
        hierarchy = load_or_build_hierarchy(run, template, cfg.K)
    init_seed, train_seed, val_seed, shuffle_seed = np.random.SeedSequence(run.seed).spawn(4)
    size = cfg.image_size
    train = stack_samples(generate_dataset(template, run.n_train, size, run.paired, train_seed))
    val = stack_samples(generate_dataset(template, run.n_val, size, False, val_seed)) if run.n_val else {}
    train = _as_float32(train, cfg.coord_scale)
    val = _as_float32(val, cfg.coord_scale)
    faces = template.mesh.faces
    train["normals"] = face_normals_batch(faces, train["meshes"])
    if "meshes2" in train:
        train["normals2"] = face_normals_batch(faces, train["meshes2"])
    if val:
        val["normals"] = face_normals_batch(faces, val["meshes"])
    return Setup(run, cfg, template, hierarchy, train, val, init_seed, shuffle_seed)


# --- loss evaluation ---------------------------------------------------------


def batch_terms(model: STMR, batch: dict, faces: np.ndarray, diagnostics: dict | None = None) -> dict:
    """Loss terms for one batch; paired batches are run as one stacked forward pass."""
    paired = "images2" in batch
    if paired:
        cat = lambda a, b: np.concatenate([batch[a], batch[b]])
        images, meshes, pose2d, normals = (cat("images", "images2"), cat("meshes", "meshes2"),
                                           cat("pose2d", "pose2d2"), cat("normals", "normals2"))
    else:
        images, meshes, pose2d, normals = batch["images"], batch["meshes"], batch["pose2d"], batch["normals"]
    pose, verts = model(Tensor(images))
    terms = {}
    terms["mesh"], terms["pose2d"] = losses.mesh_and_pose_loss(verts, meshes, pose, pose2d)
    terms["normal"] = losses.normal_loss(verts, faces, normals, diagnostics)
    terms["edge"] = losses.edge_loss(verts, meshes, faces)
    if paired:
        B = len(batch["images"])
        terms["con3d"], terms["con2d"] = losses.consistency_losses(
            batch["R"], batch["T"], verts[:B], verts[B:], pose[:B], pose[B:])
    return terms


def _slice(arrays: dict, idx) -> dict:
    return {k: v[idx] for k, v in arrays.items()}


def validate(model: STMR, setup: Setup) -> dict:
    """Validation loss plus PA errors (mm) and AUC in evaluation mode."""
    if not setup.val:
        return {}
    model.eval()
    with no_grad():
        terms = batch_terms(model, setup.val, setup.faces)
        total = losses.total_loss(terms, setup.run.weights).item()
        _, verts = model(Tensor(setup.val["images"]))
    model.train()
    scale = setup.model_cfg.coord_scale
    pred = verts.data.astype(np.float64) * scale
    gt = setup.val["meshes"].astype(np.float64) * scale
    J = setup.template.joint_regressor
    joint_err = point_errors(J @ pred, J @ gt, aligned=True)
    return {"val_loss": total, "val_pa_mpjpe": float(joint_err.mean()),
            "val_pa_mpvpe": float(point_errors(pred, gt, aligned=True).mean()),
            "val_auc_3d": pck_auc(joint_err)}


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(directory, model: STMR, opt: Adam, setup: Setup, epoch: int, rng_state: dict) -> None:
    d = Path(directory)
    records = {f"param/{k}": v for k, v in model.state_dict().items()}
    for name in sorted(opt.state.m):
        records[f"adam_m/{name}"] = opt.state.m[name]
        records[f"adam_v/{name}"] = opt.state.v[name]
    meta = {"epoch": epoch, "adam_step": opt.state.step, "rng_state": rng_state,
            "run_config": setup.run.to_dict(), "model_config": setup.model_cfg.to_dict()}
    save_records(d, records, meta)
    setup.hierarchy.save(d / "hierarchy")


def load_checkpoint(directory, model: STMR, opt: Adam | None = None) -> dict:
    records, meta = load_records(directory)
    model.load_state_dict({k[6:]: v for k, v in records.items() if k.startswith("param/")})
    if opt is not None:
        opt.state.step = meta["adam_step"]
        opt.state.m = {k[7:]: v.copy() for k, v in records.items() if k.startswith("adam_m/")}
        opt.state.v = {k[7:]: v.copy() for k, v in records.items() if k.startswith("adam_v/")}
    return meta


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: STMR
    setup: Setup
    log: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def final(self) -> dict:
        return self.log[-1]


def train(run: RunConfig, out_dir=None, resume=None, setup: Setup | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Minimize the weighted total loss with Adam and a step schedule.

    Writes ``train_log.csv`` and ``checkpoint/`` under ``out_dir`` when given.
    ``resume`` points at a checkpoint directory to continue from; ``stop_after``
    ends the run early after that many epochs (used to simulate interruption).
    """
    setup = setup or prepare(run)
    model = setup.build_model()
    opt = Adam(model.parameters(), lr=run.lr)
    shuffle_rng = np.random.default_rng(setup.shuffle_seed)
    start, log = 0, []
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        meta = load_checkpoint(resume, model, opt)
        if meta["model_config"] != setup.model_cfg.to_dict():
            raise ConfigMismatch("checkpoint model config differs from the run's")
        start = meta["epoch"]
        shuffle_rng.bit_generator.state = meta["rng_state"]
        prev = Path(resume).parent / "train_log.csv"
        if prev.exists():
            with prev.open() as fh:
                log = [row for row in csv.DictReader(fh) if int(row["epoch"]) < start]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        run.save(out / "run_config.json")
        setup.model_cfg.save(out / "model_config.json")
    diagnostics = {"zero_length_edges": 0}
    n = run.n_train
    last = run.epochs if stop_after is None else min(run.epochs, start + stop_after)
    for epoch in range(start, last):
        opt.state.lr = step_lr(run.lr, epoch, run.decay_epoch)
        order = shuffle_rng.permutation(n)
        sums = dict.fromkeys(("loss",) + losses.TERMS, 0.0)
        for lo in range(0, n, run.batch_size):
            idx = order[lo:lo + run.batch_size]
            terms = batch_terms(model, _slice(setup.train, idx), setup.faces, diagnostics)
            for name, t in terms.items():
                if not math.isfinite(t.item()):
                    raise TrainingDiverged(f"loss term {name!r} is not finite at epoch {epoch}")
            total = losses.total_loss(terms, run.weights)
            opt.zero_grad()
            total.backward()
            opt.step()
            w = len(idx) / n
            sums["loss"] += total.item() * w
            for name, t in terms.items():
                sums[name] += t.item() * w
        row = {"epoch": epoch, "lr": opt.state.lr, **sums}
        # Keyed to the schedule, not to ``last``, so interrupted runs log the same rows.
        if epoch == run.epochs - 1 or (run.eval_every and (epoch + 1) % run.eval_every == 0):
            row.update(validate(model, setup))
        log.append({k: _fmt(row.get(k, "")) for k in LOG_COLUMNS})
        if out is not None:
            write_log(out / "train_log.csv", log)
            if epoch == last - 1 or (run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0):
                save_checkpoint(out / "checkpoint", model, opt, setup, epoch + 1, shuffle_rng.bit_generator.state)
    return TrainResult(model, setup, log, diagnostics)


def write_log(path, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


# --- evaluation --------------------------------------------------------------


def report_from_predictions(pred_meshes, gt_meshes, joint_regressor) -> dict:
    """The seven-key metric report for meshes in millimeters."""
    pred = np.asarray(pred_meshes, dtype=np.float64)
    gt = np.asarray(gt_meshes, dtype=np.float64)
    J = np.asarray(joint_regressor)
    return metrics_report(pred, gt, J @ pred, J @ gt)


def load_trained(checkpoint) -> tuple[STMR, Setup]:
    """Rebuild the model stored in a checkpoint directory (no training data generated)."""
    _, meta = load_records(checkpoint)
    run = RunConfig.from_dict(meta["run_config"])
    run = replace(run, model_config_path=None, toy=False, model=meta["model_config"], n_train=1, n_val=0)
    cfg = run.model_config()
    template = generate_template(run.template_seed)
    hierarchy = MeshHierarchy.load(Path(checkpoint) / "hierarchy")
    seeds = np.random.SeedSequence(run.seed).spawn(4)
    setup = Setup(run, cfg, template, hierarchy, {}, {}, seeds[0], seeds[3])
    model = setup.build_model()
    load_checkpoint(checkpoint, model)
    model.eval()
    return model, setup


def predict_meshes(model: STMR, images: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Vertices in mm and normalized 2-D joints for [n, 3, H, W] images."""
    verts, poses = [], []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            p, v = model(Tensor(np.asarray(images[lo:lo + batch_size], dtype=np.float32)))
            verts.append(v.data.astype(np.float64) * model.cfg.coord_scale)
            poses.append(p.data.astype(np.float64))
    return np.concatenate(verts), np.concatenate(poses)


def evaluate(checkpoint, dataset: dict, out_dir=None, export_obj: int = 0) -> dict:
    """Metric report of a checkpoint on a dataset (arrays as written by ``save_dataset``)."""
    model, setup = load_trained(checkpoint)
    images = dataset["images"]
    if images.shape[-1] != setup.model_cfg.image_size or dataset["meshes"].shape[1] != setup.hierarchy.counts[0]:
        raise ConfigMismatch(
            f"dataset images {images.shape[-2:]} / {dataset['meshes'].shape[1]} vertices do not match the "
            f"checkpoint ({setup.model_cfg.image_size}px, {setup.hierarchy.counts[0]} vertices)")
    pred, _ = predict_meshes(model, images)
    report = report_from_predictions(pred, dataset["meshes"], setup.template.joint_regressor)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        for i in range(min(export_obj, len(pred))):
            save_obj(setup.template.mesh.with_vertices(pred[i]), out / f"pred_{i:04d}.obj")
    return report


# --- ablations ---------------------------------------------------------------

VARIANTS = {
    "full": {},
    "no_mspfe": {"use_mspfe": False},
    "no_ppvl": {"use_ppvl": False},
    "no_mspfe_no_ppvl": {"use_mspfe": False, "use_ppvl": False},
    "sw_msa": {"decoder": "sw_msa"},
    "global_msa": {"decoder": "global_msa"},
    "spiral_conv": {"decoder": "spiral_conv"},
    "depthwise_conv": {"decoder": "depthwise_conv"},
}
MODULE_GRID = ("no_mspfe_no_ppvl", "no_ppvl", "no_mspfe", "full")
DECODER_SWEEP = ("global_msa", "spiral_conv", "depthwise_conv", "sw_msa")


def variant_config(run: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return replace(run, model={**run.model, **VARIANTS[name]})


def ablation_run(run: RunConfig, variants=MODULE_GRID + DECODER_SWEEP, out_dir=None) -> list[dict]:
    """Train every variant under the same seed and config; one result row per variant.

    Variants that resolve to the same model config are trained once.
    """
    setup = prepare(run)
    cache, rows = {}, []
    for name in variants:
        vrun = variant_config(run, name)
        cfg = vrun.model_config()
        key = json.dumps(cfg.to_dict(), sort_keys=True)
        if key not in cache:
            vsetup = replace(setup, run=vrun, model_cfg=cfg)
            vout = None if out_dir is None else Path(out_dir) / name
            cache[key] = train(vrun, vout, setup=vsetup).final
        final = cache[key]
        rows.append({"variant": name, "mspfe": cfg.use_mspfe, "ppvl": cfg.use_ppvl, "decoder": cfg.decoder,
                     "auc": float(final["val_auc_3d"]), "pj": float(final["val_pa_mpjpe"]),
                     "pv": float(final["val_pa_mpvpe"]), "val_loss": float(final["val_loss"])})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
        (out / "ablation.md").write_text(format_tables(rows))
    return rows


def format_tables(rows: list[dict]) -> str:
    """Markdown tables: module on/off grid and decoder comparison."""
    mark = lambda b: "✓" if b else ""
    lines = []
    grid = [r for r in rows if r["variant"] in MODULE_GRID]
    if grid:
        lines += ["| MSPFE | PPVL | AUC | PJ | PV |", "|---|---|---|---|---|"]
        lines += [f"| {mark(r['mspfe'])} | {mark(r['ppvl'])} | {r['auc']:.3f} | {r['pj']:.2f} | {r['pv']:.2f} |"
                  for r in grid]
        lines.append("")
    sweep = [r for r in rows if r["variant"] in DECODER_SWEEP]
    if sweep:
        lines += ["| Decoder | AUC | PJ | PV |", "|---|---|---|---|"]
        lines += [f"| {r['decoder']} | {r['auc']:.3f} | {r['pj']:.2f} | {r['pv']:.2f} |" for r in sweep]
        lines.append("")
    return "\n".join(lines)


__all__ = [
    "ConfigMismatch", "DECODER_SWEEP", "LOG_COLUMNS", "METRIC_KEYS", "MODULE_GRID", "RunConfig", "Setup",
    "TrainResult", "TrainingDiverged", "VARIANTS", "ablation_run", "batch_terms", "evaluate",
    "fingertip_neighbors", "format_tables", "overfit_config", "load_checkpoint", "load_trained", "predict_meshes", "prepare",
    "report_from_predictions", "save_checkpoint", "train", "validate", "variant_config", "write_log",
]
