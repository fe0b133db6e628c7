"""End-to-end orchestration with content-addressed, resumable stages.

Every stage writes into ``<workdir>/stages/<name>-<key>/`` where ``key`` is
a 64-bit hash of the stage parameters and the content hashes of its
inputs. A completed stage leaves ``stage.json`` listing the hash of every
output file; a later run reuses the directory only if those hashes still
match, otherwise the stage is recomputed.
"""

import contextlib
import csv
import io
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baseline import CosineBackend
from .binio import short_hash
from .classify import LabelCodec, MlpConfig, load_classifier, save_classifier, train_linear_margin, train_mlp
from .config import PipelineConfig
from .corpus import CorpusSpec, Manifest, generate_corpus, read_manifest
from .errors import DataError, IvxError, NumericError
from .frontend import extract_features, load_features, read_wav, save_features
from .gmm import load_gmm, save_gmm, train_ubm
from .metrics import BinaryCounts, accuracy, binary_metrics, confusion_csv, mcc, multiclass_metrics, report, roc_csv
from .sae import TrainConfig, encode_raw, save_sae, train_sae
from .tvspace import (IVector, accumulate_stats, center_stats, extract_ivector, load_ivectors, load_tv,
                      save_ivectors, save_tv, stats_from_bytes, stats_to_bytes, train_tv)

log = logging.getLogger(__name__)

STAGES = ("corpus", "features", "ubm", "stats", "tv", "ivectors", "sae", "classifier", "evaluate")
LOCK_NAME = ".ivx.lock"
RECORD_NAME = "run_record.json"


@dataclass
class StageResult:
    name: str
    key: str
    path: str
    outputs: dict  # relative file name -> content hash
    cached: bool = False

    @property
    def digest(self) -> str:
        return short_hash(json.dumps(self.outputs, sort_keys=True).encode())


@dataclass
class RunRecord:
    config_hash: str
    manifest_hash: str
    stage_hashes: dict = field(default_factory=dict)  # stage -> {"key", "outputs"}
    cached: dict = field(default_factory=dict)
    report_path: str = ""
    started: float = 0.0
    finished: float = 0.0

    def hashes(self) -> dict:
        """Everything that must be stable across identical re-runs."""
        return {"config_hash": self.config_hash, "manifest_hash": self.manifest_hash,
                "stages": self.stage_hashes}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return short_hash(fh.read())


def _hash_tree(root) -> dict:
    out = {}
    for base, dirs, files in os.walk(root):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(base, name)
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            if rel != "stage.json":
                out[rel] = file_hash(full)
    return out


@contextlib.contextmanager
def workdir_lock(workdir):
    """Exclusive per-directory lock; a second pipeline fails instead of interleaving writes."""
    os.makedirs(workdir, exist_ok=True)
    path = os.path.join(workdir, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{workdir} is locked by another pipeline (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


class _Runner:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = os.path.join(cfg.workdir, "stages")
        self.results = {}

    def stage(self, name, params, inputs, build):
        """Run ``build(tmp_dir)`` unless an intact output for the same key exists."""
        upstream = {dep: self.results[dep].digest for dep in inputs}
        key = short_hash(json.dumps({"stage": name, "params": params, "inputs": upstream},
                                    sort_keys=True, default=list).encode())
        path = os.path.join(self.root, f"{name}-{key}")
        marker = os.path.join(path, "stage.json")
        if os.path.exists(marker):
            with open(marker) as fh:
                recorded = json.load(fh)["outputs"]
            if _hash_tree(path) == recorded:
                log.info("stage %-10s %s cached", name, key)
                self.results[name] = StageResult(name, key, path, recorded, cached=True)
                return self.results[name]
            log.warning("stage %s: stored outputs do not match their hashes, recomputing", name)
        shutil.rmtree(path, ignore_errors=True)
        tmp = path + ".tmp"
        shutil.rmtree(tmp, ignore_errors=True)
        os.makedirs(tmp)
        t0 = time.perf_counter()
        try:
            build(tmp)
        except IvxError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            raise type(exc)(f"stage {name} failed (inputs {upstream or 'none'}): {exc}") from exc
        except np.linalg.LinAlgError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            raise NumericError(f"stage {name} failed (inputs {upstream or 'none'}): {exc}") from exc
        outputs = _hash_tree(tmp)
        with open(os.path.join(tmp, "stage.json"), "w") as fh:
            json.dump({"stage": name, "key": key, "params": params, "inputs": upstream, "outputs": outputs},
                      fh, sort_keys=True, indent=2, default=list)
        os.rename(tmp, path)
        log.info("stage %-10s %s done in %.1f s", name, key, time.perf_counter() - t0)
        self.results[name] = StageResult(name, key, path, outputs)
        return self.results[name]

    def file(self, stage, name):
        return os.path.join(self.results[stage].path, name)


# -- helpers shared by run_pipeline and compare_backends ---------------------

def task_label(record, task: str) -> str:
    return record.gender if task == "binary" else record.speaker_id


def corpus_spec(cfg: PipelineConfig) -> CorpusSpec:
    c = cfg.corpus
    return CorpusSpec(ubm_speakers=c.ubm_speakers, ubm_utts_per_speaker=c.ubm_utts_per_speaker,
                      task_speakers=c.task_speakers, train_utts_per_speaker=c.train_utts_per_speaker,
                      test_utts_per_speaker=c.test_utts_per_speaker, duration_s=c.duration_s,
                      male_ratio=c.male_ratio, n_channels=c.n_channels, cross_channel=c.cross_channel)


def _load_manifest(runner) -> tuple:
    """Manifest plus the directory its relative paths resolve against."""
    if runner.cfg.corpus.synthesize:
        base = runner.file("corpus", "corpus")
    else:
        base = os.path.dirname(os.path.abspath(runner.cfg.corpus.manifest))
    manifest = read_manifest(os.path.join(base, "manifest.csv") if runner.cfg.corpus.synthesize
                             else runner.cfg.corpus.manifest)
    for r in manifest.records:
        if not os.path.exists(os.path.join(base, r.path)):
            raise DataError(f"manifest entry {r.utterance_id}: missing audio file {r.path}")
    return manifest, base


def _corpus_stage(runner):
    cfg = runner.cfg
    if cfg.corpus.synthesize:
        params = {k: v for k, v in cfg.section("corpus").items() if k != "manifest"}
        return runner.stage("corpus", params, [],
                            lambda out: generate_corpus(corpus_spec(cfg), os.path.join(out, "corpus"),
                                                        seed=cfg.corpus.seed))
    # an external corpus is not copied; its content hash stands in for the stage output
    path = cfg.corpus.manifest
    if not os.path.exists(path):
        raise DataError(f"manifest {path} does not exist")
    base = os.path.dirname(os.path.abspath(path))
    outputs = {"manifest.csv": file_hash(path)}
    for r in read_manifest(path).records:
        full = os.path.join(base, r.path)
        if not os.path.exists(full):
            raise DataError(f"manifest entry {r.utterance_id}: missing audio file {r.path}")
        outputs[r.path] = file_hash(full)
    key = short_hash(json.dumps(outputs, sort_keys=True).encode())
    runner.results["corpus"] = StageResult("corpus", key, base, outputs, cached=True)
    return runner.results["corpus"]


def _features_build(runner, manifest, base):
    fe = runner.cfg.frontend

    def build(out):
        os.makedirs(os.path.join(out, "feat"))
        for r in manifest.records:
            fs = extract_features(read_wav(os.path.join(base, r.path)), frame_len=fe.frame_len,
                                  frame_shift=fe.frame_shift, preemphasis=fe.preemphasis, n_mels=fe.n_mels,
                                  n_ceps=fe.n_ceps, vad_threshold_db=fe.vad_threshold_db,
                                  frames_per_utterance=fe.frames_per_utterance)
            save_features(os.path.join(out, "feat", f"{r.utterance_id}.ivxf"), fs)
    return build


def _features(runner, manifest):
    return {r.utterance_id: load_features(runner.file("features", f"feat/{r.utterance_id}.ivxf"))
            for r in manifest.records}


def ubm_records(manifest: Manifest):
    """UBM data: the dedicated split when present, else the training split."""
    return manifest.split("ubm") or manifest.split("train")


def _ubm_build(runner, manifest):
    u = runner.cfg.ubm

    def build(out):
        feats = _features(runner, manifest)
        frames = np.vstack([feats[r.utterance_id].voiced for r in ubm_records(manifest)])
        gmm, trace = train_ubm(frames, u.components, iters=u.iters, seed=u.seed,
                               var_floor_factor=u.var_floor_factor, tol=u.tol)
        save_gmm(os.path.join(out, "ubm.ivxg"), gmm)
        _write_json(os.path.join(out, "trace.json"), {"loglik": [float(v) for v in trace]})
    return build


def _stats_build(runner, manifest):
    def build(out):
        gmm = load_gmm(runner.file("ubm", "ubm.ivxg"))
        feats = _features(runner, manifest)
        stats = []
        for r in manifest.records:
            st = accumulate_stats(gmm, feats[r.utterance_id], r.utterance_id, r.speaker_id, r.channel_id)
            stats.append(center_stats(st, gmm) if runner.cfg.tv.center else st)
        with open(os.path.join(out, "stats.ivxs"), "wb") as fh:
            fh.write(stats_to_bytes(stats))
    return build


def _load_stats(runner):
    with open(runner.file("stats", "stats.ivxs"), "rb") as fh:
        return stats_from_bytes(fh.read())


def _tv_build(runner, manifest):
    tv = runner.cfg.tv

    def build(out):
        gmm = load_gmm(runner.file("ubm", "ubm.ivxg"))
        use = {r.utterance_id for r in manifest.records if r.split in ("ubm", "train")}
        stats = [s for s in _load_stats(runner) if s.utterance_id in use]
        model, trace = train_tv(gmm, stats, rank=tv.rank, iters=tv.iters, seed=tv.seed, mstep=tv.mstep)
        save_tv(os.path.join(out, "tv.ivxt"), model)
        _write_json(os.path.join(out, "trace.json"), {"loglik": [float(v) for v in trace["loglik"]]})
    return build


def _ivectors_build(runner):
    def build(out):
        model = load_tv(runner.file("tv", "tv.ivxt"), load_gmm(runner.file("ubm", "ubm.ivxg")))
        allow = not runner.cfg.tv.center
        save_ivectors(os.path.join(out, "ivectors.ivxv"),
                      [extract_ivector(model, s, allow_uncentered=allow) for s in _load_stats(runner)])
    return build


def _ivectors_by_split(runner, manifest):
    ivecs = {iv.utterance_id: iv for iv in load_ivectors(runner.file("ivectors", "ivectors.ivxv"))}
    return {split: [ivecs[r.utterance_id] for r in manifest.split(split)] for split in ("train", "test")}


def sae_train_config(cfg: PipelineConfig) -> TrainConfig:
    s = cfg.sae
    return TrainConfig(learning_rate=s.learning_rate, epochs=s.epochs, batch_size=s.batch_size,
                       seed=s.seed, pretrain_epochs=s.pretrain_epochs)


def _sae_build(runner, manifest):
    s = runner.cfg.sae

    def build(out):
        by_split = _ivectors_by_split(runner, manifest)
        x = np.array([iv.w for iv in by_split["train"]])
        model, trace = train_sae(x, list(s.layers), sae_train_config(runner.cfg), activation=s.activation,
                                 standardize=s.standardize, tied=s.tied)
        save_sae(os.path.join(out, "sae.ivxa"), model)
        everything = load_ivectors(runner.file("ivectors", "ivectors.ivxv"))
        codes = encode_raw(model, np.array([iv.w for iv in everything]))
        save_ivectors(os.path.join(out, "codes.ivxv"),
                      [IVector(c, iv.utterance_id, iv.speaker_id, iv.channel_id) for c, iv in zip(codes, everything)])
        _write_json(os.path.join(out, "trace.json"), {"loss": [float(v) for v in trace]})
    return build


def _codes_by_split(runner, manifest):
    codes = {c.utterance_id: c.w for c in load_ivectors(runner.file("sae", "codes.ivxv"))}
    return {split: np.array([codes[r.utterance_id] for r in manifest.split(split)]) for split in ("train", "test")}


def mlp_config(cfg: PipelineConfig) -> MlpConfig:
    c = cfg.classifier
    return MlpConfig(hidden_dim=c.hidden_dim, learning_rate=c.learning_rate, epochs=c.epochs,
                     batch_size=c.batch_size, weight_decay=c.weight_decay, seed=c.seed)


def train_classifier(cfg: PipelineConfig, codes, labels):
    c = cfg.classifier
    if c.kind == "svm":
        return train_linear_margin(codes, labels, reg_c=c.reg_c, epochs=c.svm_epochs, seed=c.seed)[0]
    return train_mlp(codes, labels, mlp_config(cfg))[0]


def _classifier_build(runner, manifest):
    def build(out):
        codes = _codes_by_split(runner, manifest)["train"]
        labels = [task_label(r, runner.cfg.task.task) for r in manifest.split("train")]
        save_classifier(os.path.join(out, "classifier.bin"), train_classifier(runner.cfg, codes, labels))
    return build


def evaluate_scores(task: str, classes, scores, y_true) -> tuple:
    """Metrics from an N x K score matrix; returns ``(metrics, predictions)``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    codec = LabelCodec(classes)
    y_pred = [codec.classes[i] for i in np.argmax(scores, axis=1)]
    if task == "binary":
        if len(codec) != 2:
            raise DataError(f"binary task needs exactly 2 classes, found {list(codec.classes)}")
        positive = codec.classes[1]
        # margin of the positive class over the negative one
        margin = scores[:, 1] - scores[:, 0]
        if len(set(y_true)) < 2:
            counts = BinaryCounts.from_predictions(y_true, y_pred, positive)
            return {"task": "binary", "positive_class": positive, "n": counts.total,
                    "acc": accuracy(counts), "mcc": mcc(counts), "auc": None}, y_pred
        return binary_metrics(margin, y_true, y_pred, positive), y_pred
    return multiclass_metrics(y_true, y_pred, codec), y_pred


def _evaluate_build(runner, manifest):
    task = runner.cfg.task.task

    def build(out):
        model = load_classifier(runner.file("classifier", "classifier.bin"), runner.cfg.classifier.hidden_dim)
        test = manifest.split("test")
        if not test:
            raise DataError("manifest has no test split")
        codes = _codes_by_split(runner, manifest)["test"]
        y_true = [task_label(r, task) for r in test]
        unknown = sorted(set(y_true) - set(model.codec.classes))
        if unknown:
            raise DataError(f"test labels never seen in training: {unknown[:5]}")
        scores = model.score(codes)
        metrics, y_pred = evaluate_scores(task, model.codec.classes, scores, y_true)
        with open(os.path.join(out, "report.json"), "w") as fh:
            fh.write(report(metrics, runner.cfg.hash(), model_hashes(runner)))
        with open(os.path.join(out, "predictions.csv"), "w") as fh:
            fh.write(predictions_csv([r.utterance_id for r in test], y_pred, scores, model.codec.classes))
        if task == "binary":
            with open(os.path.join(out, "roc.csv"), "w") as fh:
                fh.write(roc_csv(metrics["roc"]))
        else:
            with open(os.path.join(out, "confusion.csv"), "w") as fh:
                fh.write(confusion_csv(metrics))
    return build


def model_hashes(runner) -> dict:
    names = {"ubm": "ubm.ivxg", "tv": "tv.ivxt", "sae": "sae.ivxa", "classifier": "classifier.bin"}
    return {stage: runner.results[stage].outputs[f] for stage, f in names.items() if stage in runner.results}


def predictions_csv(utterance_ids, predicted, scores, classes) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utterance_id", "predicted"] + [f"score_{c}" for c in classes])
    for utt, p, row in zip(utterance_ids, predicted, np.atleast_2d(scores)):
        w.writerow([utt, p] + [repr(float(v)) for v in row])
    return buf.getvalue()


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _run_stages(runner, until: str):
    cfg = runner.cfg
    _corpus_stage(runner)
    manifest, base = _load_manifest(runner)
    plan = [
        ("features", cfg.section("frontend"), ["corpus"], _features_build(runner, manifest, base)),
        ("ubm", cfg.section("ubm"), ["features"], _ubm_build(runner, manifest)),
        ("stats", {"center": cfg.tv.center}, ["features", "ubm"], _stats_build(runner, manifest)),
        ("tv", cfg.section("tv"), ["stats", "ubm"], _tv_build(runner, manifest)),
        ("ivectors", {}, ["tv", "stats"], _ivectors_build(runner)),
        ("sae", cfg.section("sae"), ["ivectors"], _sae_build(runner, manifest)),
        ("classifier", {**cfg.section("classifier"), "task": cfg.task.task}, ["sae", "corpus"],
         _classifier_build(runner, manifest)),
        ("evaluate", {"task": cfg.task.task, "config_hash": cfg.hash()}, ["classifier", "sae", "corpus"],
         _evaluate_build(runner, manifest)),
    ]
    if until != "corpus":
        for name, params, inputs, build in plan:
            runner.stage(name, params, inputs, build)
            if name == until:
                break
    return manifest


def run_pipeline(cfg: PipelineConfig, until: str = "evaluate") -> RunRecord:
    """Execute (or resume) every stage up to ``until`` and write the run record."""
    if until not in STAGES:
        raise DataError(f"unknown stage {until!r}; choose from {', '.join(STAGES)}")
    cfg.validate()
    started = time.time()
    with workdir_lock(cfg.workdir):
        runner = _Runner(cfg)
        _run_stages(runner, until)
        record = RunRecord(
            config_hash=cfg.hash(),
            manifest_hash=runner.results["corpus"].digest,
            stage_hashes={n: {"key": r.key, "outputs": r.digest} for n, r in runner.results.items()},
            cached={n: r.cached for n, r in runner.results.items()},
            started=started,
        )
        if "evaluate" in runner.results:
            record.report_path = runner.file("evaluate", "report.json")
            shutil.copyfile(record.report_path, os.path.join(cfg.workdir, "report.json"))
        record.finished = time.time()
        with open(os.path.join(cfg.workdir, RECORD_NAME), "w") as fh:
            fh.write(record.to_json())
    return record


def channel_condition(test_channel: str, train_channels) -> str:
    return "matched" if test_channel in train_channels else "cross"


def compare_backends(cfg: PipelineConfig) -> dict:
    """Score the SAE+classifier and LDA/WCCN/cosine back-ends on the same i-vectors.

    Metrics are reported for the whole test split and for its matched- and
    cross-channel subsets (relative to the channels seen in training).
    Writes ``compare.json`` to the working directory and returns the document.
    """
    cfg.validate()
    record = run_pipeline(cfg)
    with workdir_lock(cfg.workdir):
        runner = _Runner(cfg)
        _run_stages(runner, "evaluate")  # all cached; restores stage paths
        manifest, _ = _load_manifest(runner)
        for stage in ("ivectors", "sae", "classifier"):
            if stage not in runner.results:
                raise DataError(f"comparison needs the {stage} stage output")
        task = cfg.task.task
        train, test = manifest.split("train"), manifest.split("test")
        ivecs = _ivectors_by_split(runner, manifest)
        x_train = np.array([iv.w for iv in ivecs["train"]])
        x_test = np.array([iv.w for iv in ivecs["test"]])
        y_train = [task_label(r, task) for r in train]
        y_test = [task_label(r, task) for r in test]

        n_classes = len(set(y_train))
        lda_dim = min(cfg.task.lda_dim, n_classes - 1, x_train.shape[1])
        backend = CosineBackend.fit(x_train, y_train, lda_dim)
        baseline_scores = backend.score(x_test)

        clf = load_classifier(runner.file("classifier", "classifier.bin"), cfg.classifier.hidden_dim)
        sae_scores = clf.score(_codes_by_split(runner, manifest)["test"])

        train_channels = {r.channel_id for r in train}
        conditions = [channel_condition(r.channel_id, train_channels) for r in test]
        subsets = {"all": np.arange(len(test))}
        for cond in ("matched", "cross"):
            idx = np.array([i for i, c in enumerate(conditions) if c == cond], dtype=int)
            if idx.size:
                subsets[cond] = idx

        results = {}
        for name, classes, scores in (("sae_" + cfg.classifier.kind, clf.codec.classes, sae_scores),
                                      ("lda_wccn_cosine", backend.classes, baseline_scores)):
            results[name] = {}
            for subset, idx in subsets.items():
                metrics, _ = evaluate_scores(task, classes, scores[idx], [y_test[i] for i in idx])
                metrics.pop("roc", None)
                results[name][subset] = metrics
        summary_key = "acc" if task == "binary" else "recognition_rate"
        doc = {
            "task": task,
            "config_hash": record.config_hash,
            "ivectors_hash": runner.results["ivectors"].digest,
            "model_hashes": model_hashes(runner),
            "test_conditions": {k: int(v.size) for k, v in subsets.items()},
            "backends": results,
            "summary": {b: {s: m[summary_key] for s, m in r.items()} for b, r in results.items()},
        }
        with open(os.path.join(cfg.workdir, "compare.json"), "w") as fh:
            fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc
