"""Pipeline commands. Each one reads its inputs from disk and writes artifacts under ``out``.

Output tree::

    <out>/manifest.json                      every produced path with its sha256
    <out>/configs/<command>.yaml             resolved config of the last run
    <out>/data/{train,test}/...              synthetic data and perturbations
    <out>/checkpoints/{segnet,translator,end2end}.ckpt
    <out>/curves/<model>_loss.csv
    <out>/predictions/{orig,gp_ts,oracle_gp,end2end}/<id>.pgm
    <out>/translated/<id>.tensor
    <out>/reports/*.csv
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import tensor_core as tc
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, dump_config
from .data import DataLayout, Sample, atomic_write_bytes, generate_synthetic, read_labels, \
    read_tensor, stack_samples, write_labels, write_tensor
from .metrics import MetricsReport, segmentation_report, ssim, summary_csv
from .optim import minibatch_train
from .perturb import batch_perturb, read_deltas
from .segnet import SegModel, build_segnet, cross_entropy, load_segnet, predict, save_segnet, \
    seg_logits, train_segmentation
from .translator import TranslatorModel, build_translator, load_translator, reconstruction_fidelity, \
    save_translator, translate, translate_batch, train_translator

log = logging.getLogger(__name__)

METHODS = ("orig", "gp_ts", "oracle_gp")
COMMANDS = ("gen-data", "train-seg", "perturb", "train-translator", "infer", "evaluate",
            "end2end-baseline")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _curve_csv(curve: Sequence[float]) -> bytes:
    return _csv(["epoch", "loss"], [[i + 1, repr(float(v))] for i, v in enumerate(curve)])


@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path

    def __post_init__(self):
        self.out = Path(self.out)
        self.produced: list[Path] = []
        self.artifacts = DataLayout(self.out / "data", self.cfg.segnet.num_classes)
        src = Path(self.cfg.data_root) if self.cfg.data_root else self.out / "data"
        self.inputs = DataLayout(src, self.cfg.segnet.num_classes)

    # paths ---------------------------------------------------------------
    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def checkpoint(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.ckpt")

    def write(self, path: Path, payload: bytes) -> Path:
        atomic_write_bytes(path, payload)
        self.produced.append(path)
        return path

    def record(self, paths: Sequence[Path]) -> None:
        self.produced.extend(paths)

    # inputs --------------------------------------------------------------
    def samples(self, split: str) -> list[Sample]:
        d = self.inputs.dir(split, "images")
        if not d.is_dir():
            raise FileNotFoundError(f"no {split} images at {d}; run gen-data or set data_root")
        samples = self.inputs.read_samples(split)
        if not samples:
            raise FileNotFoundError(f"{d} holds no images")
        return samples

    def require(self, path: Path, hint: str) -> Path:
        if not path.is_file():
            raise FileNotFoundError(f"missing {path}; {hint}")
        return path

    def segnet(self) -> SegModel:
        return load_segnet(self.require(self.checkpoint("segnet"), "run train-seg first"))

    def translator(self) -> TranslatorModel:
        return load_translator(self.require(self.checkpoint("translator"),
                                            "run train-translator first"))

    # provenance ----------------------------------------------------------
    def finish(self, command: str) -> Path:
        """Write the resolved config and merge this run's outputs into the manifest."""
        self.write(self.path("configs", f"{command}.yaml"), dump_config(self.cfg).encode("utf-8"))
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text()) if mpath.is_file() else {"commands": {}, "files": {}}
        rel = sorted({p.relative_to(self.out).as_posix() for p in self.produced})
        manifest["commands"][command] = {"config_sha256": self.cfg.digest(), "seed": self.cfg.seed,
                                         "outputs": rel}
        for r in rel:
            manifest["files"][r] = sha256_file(self.out / r)
        atomic_write_bytes(mpath, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        return mpath


# ------------------------------------------------------------------ commands


def gen_data(run: Run) -> None:
    if run.cfg.data_root:
        raise FileExistsError("data_root is set; gen-data only writes synthetic data under --out")
    train, test = generate_synthetic(run.cfg.data)
    for split, samples in (("train", train), ("test", test)):
        run.record(run.artifacts.write_samples(split, samples))


def train_seg(run: Run) -> None:
    cfg = run.cfg
    model = build_segnet(cfg.segnet, cfg.seed)
    model, curve = train_segmentation(model, run.samples("train"), cfg.seg_train.epochs,
                                      cfg.seg_train.batch_size, cfg.seg_train.optimizer(), cfg.seed)
    save_segnet(run.checkpoint("segnet"), model)
    run.record([run.checkpoint("segnet")])
    run.write(run.path("curves", "segnet_loss.csv"), _curve_csv(curve))


def perturb(run: Run, split: str) -> None:
    model = run.segnet()
    samples = run.samples(split)
    summary = batch_perturb(model, samples, run.cfg.perturb, run.artifacts, split)
    for r in summary.results:
        stem = r.id
        run.record([run.artifacts.dir(split, k) / f"{stem}.{ext}"
                    for k, ext in (("perturbed", "tensor"), ("deltas", "tensor"), ("traces", "csv"))])
        if split == "test":
            pred = predict(model, r.perturbed)
            p = run.path("predictions", "oracle_gp", f"{stem}.pgm")
            write_labels(p, pred, model.config.num_classes)
            run.record([p])
    rows = [[r.id, r.terminated_by, r.steps, repr(r.initial_dice), repr(r.final_dice), ""]
            for r in summary.results]
    rows += [[sid, "failed", 0, "", "", msg] for sid, msg in summary.failures.items()]
    run.write(run.path("reports", f"perturb_{split}.csv"),
              _csv(["id", "terminated_by", "steps", "initial_dice", "final_dice", "error"], rows))
    log.info("perturb %s: %s, %d failed", split, summary.terminations(), len(summary.failures))


def _pairs(run: Run, split: str):
    samples = run.samples(split)
    ids = [s.id for s in samples]
    deltas = read_deltas(run.artifacts, split, ids)
    return ids, [(s.image, s.image + d) for s, d in zip(samples, deltas)]


def train_translator_cmd(run: Run) -> None:
    cfg = run.cfg
    ids, pairs = _pairs(run, "train")
    model = build_translator(cfg.translator, cfg.seed)
    model, curve = train_translator(model, pairs, cfg.translator_train.epochs,
                                    cfg.translator_train.batch_size, cfg.loss,
                                    cfg.translator_train.optimizer(), cfg.seed)
    save_translator(run.checkpoint("translator"), model)
    run.record([run.checkpoint("translator")])
    run.write(run.path("curves", "translator_loss.csv"), _curve_csv(curve))
    rep = reconstruction_fidelity(model, ids, pairs, cfg.loss)
    run.write(run.path("reports", "fidelity_train.csv"), rep.per_sample_csv().encode())


def infer(run: Run, split: str = "test") -> None:
    seg, trans = run.segnet(), run.translator()
    samples = run.samples(split)
    images, _ = stack_samples(samples)
    translated = translate_batch(trans, images)
    orig, gp_ts = predict(seg, images), predict(seg, translated)
    L = seg.config.num_classes
    for i, s in enumerate(samples):
        tp = run.path("translated", f"{s.id}.tensor")
        write_tensor(tp, translated[i])
        run.record([tp])
        for method, pred in (("orig", orig[i]), ("gp_ts", gp_ts[i])):
            p = run.path("predictions", method, f"{s.id}.pgm")
            write_labels(p, pred, L)
            run.record([p])


def evaluate(run: Run, split: str = "test") -> dict[str, MetricsReport]:
    """Metrics from on-disk predictions only; no model is evaluated."""
    L = run.cfg.segnet.num_classes
    mask_dir = run.inputs.dir(split, "masks")
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"no ground truth at {mask_dir}")
    ids = sorted(p.stem for p in mask_dir.glob("*.pgm"))
    gts = [read_labels(mask_dir / f"{i}.pgm", L) for i in ids]
    reports = {}
    for method in METHODS:
        d = run.path("predictions", method)
        if not d.is_dir():
            if method == "oracle_gp":
                continue
            raise FileNotFoundError(f"no {method} predictions at {d}; run infer first")
        preds = [read_labels(run.require(d / f"{i}.pgm", "predictions incomplete"), L) for i in ids]
        rep = segmentation_report(ids, preds, gts)
        reports[method] = rep
        run.write(run.path("reports", f"{method}_per_sample.csv"), rep.per_sample_csv().encode())
        run.write(run.path("reports", f"{method}_kde.csv"), rep.kde_csv().encode())
    run.write(run.path("reports", "summary.csv"), summary_csv(reports).encode())
    # GP vs GP_Ts similarity, when the oracle perturbations of this split exist
    pdir = run.artifacts.dir(split, "perturbed")
    tdir = run.path("translated")
    common = [i for i in ids if (pdir / f"{i}.tensor").is_file() and (tdir / f"{i}.tensor").is_file()]
    if common:
        rows = [{"id": i, "ssim": ssim(read_tensor(tdir / f"{i}.tensor"), read_tensor(pdir / f"{i}.tensor"),
                                       run.cfg.loss)} for i in common]
        rep = MetricsReport(rows).finalize()
        run.write(run.path("reports", "fidelity_test.csv"), rep.per_sample_csv().encode())
    return reports


def end2end_baseline(run: Run, split: str = "test") -> None:
    """Translator feeding segnet, trained jointly from scratch on cross-entropy alone.

    Compared with the GP_Ts predictions already on disk. Both arms hold one
    translator plus one segnet of the configured sizes.
    """
    cfg = run.cfg
    gp_dir = run.path("predictions", "gp_ts")
    if not gp_dir.is_dir():
        raise FileNotFoundError(f"no GP_Ts predictions at {gp_dir}; run infer first")
    train = run.samples("train")
    images, masks = stack_samples(train, cfg.segnet.num_classes)
    seg = build_segnet(cfg.segnet, cfg.seed)
    trans = build_translator(cfg.translator, cfg.seed)
    params = {**{f"translator/{k}": v for k, v in trans.params.items()},
              **{f"segnet/{k}": v for k, v in seg.params.items()}}

    def split_params(p):
        return ({k[11:]: v for k, v in p.items() if k.startswith("translator/")},
                {k[7:]: v for k, v in p.items() if k.startswith("segnet/")})

    def loss_fn(p, idx):
        tp, sp = split_params(p)
        return cross_entropy(seg_logits(seg, translate(trans, images[idx], tp), sp), masks[idx])

    t = cfg.end2end_train
    params, curve = minibatch_train(params, loss_fn, len(train), t.epochs, t.batch_size,
                                    t.optimizer(), cfg.seed)
    tp, sp = split_params(params)
    trans, seg = TranslatorModel(trans.config, tp), SegModel(seg.config, sp)
    save_checkpoint(run.checkpoint("end2end"), "end2end", {"segnet": vars(seg.config),
                                                          "translator": vars(trans.config)}, params)
    run.record([run.checkpoint("end2end")])
    run.write(run.path("curves", "end2end_loss.csv"), _curve_csv(curve))

    test = run.samples(split)
    x, y = stack_samples(test, cfg.segnet.num_classes)
    e2e = predict(seg, translate_batch(trans, x))
    L = cfg.segnet.num_classes
    for i, s in enumerate(test):
        p = run.path("predictions", "end2end", f"{s.id}.pgm")
        write_labels(p, e2e[i], L)
        run.record([p])
    ids = [s.id for s in test]
    gp = [read_labels(run.require(gp_dir / f"{i}.pgm", "GP_Ts predictions incomplete"), L) for i in ids]
    gp_rep = segmentation_report(ids, gp, list(y))
    e2e_rep = segmentation_report(ids, list(e2e), list(y))
    rows = [[i, repr(a["dice"]), repr(b["dice"])] for i, a, b in zip(ids, gp_rep.rows, e2e_rep.rows)]
    run.write(run.path("reports", "end2end_comparison.csv"),
              _csv(["id", "gp_ts_dice", "end2end_dice"], rows))
    n_params = sum(v.size for v in params.values())
    summary = []
    for name, rep in (("gp_ts", gp_rep), ("end2end", e2e_rep)):
        mu, se = rep.aggregates["dice"]
        summary.append([name, repr(mu), repr(se), len(ids), n_params])
    run.write(run.path("reports", "end2end_summary.csv"),
              _csv(["method", "dice_mean", "dice_stderr", "n", "parameters"], summary))


def run_command(command: str, cfg: ExperimentConfig, out: Path, split: str | None = None) -> Path:
    run = Run(cfg, out)
    if command == "gen-data":
        gen_data(run)
    elif command == "train-seg":
        train_seg(run)
    elif command == "perturb":
        perturb(run, split or "train")
    elif command == "train-translator":
        train_translator_cmd(run)
    elif command == "infer":
        infer(run, split or "test")
    elif command == "evaluate":
        evaluate(run, split or "test")
    elif command == "end2end-baseline":
        end2end_baseline(run, split or "test")
    else:
        raise tc.ContractViolation(f"unknown command {command!r}")
    return run.finish(command)
