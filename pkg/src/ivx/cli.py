"""``ivx`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import glob
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .baseline import CosineBackend, transform_to_bytes
from .classify import MlpConfig, load_classifier, save_classifier, train_linear_margin, train_mlp
from .config import SEED_ENV, load_config
from .corpus import CorpusSpec, generate_corpus
from .errors import ConfigError, DataError, IvxError
from .frontend import extract_features, load_features, read_wav, save_features
from .gmm import load_gmm, save_gmm, train_ubm
from .pipeline import compare_backends, evaluate_scores, predictions_csv, run_pipeline
from .metrics import confusion_csv, report, roc_csv
from .sae import TrainConfig, encode_raw, load_sae, save_sae, train_sae
from .tvspace import (IVector, accumulate_stats, center_stats, extract_ivector, load_ivectors, load_tv,
                      save_ivectors, save_tv, train_tv)

log = logging.getLogger("ivx")


def _seed(value: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return value


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _feature_files(path):
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.ivxf")))
    else:
        files = [path]
    if not files:
        raise DataError(f"no .ivxf feature files under {path}")
    return files


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def read_labels(path) -> dict:
    """``utterance_id -> row`` from a CSV with an ``utterance_id`` column (a corpus manifest works)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "utterance_id" not in rows[0]:
        raise DataError(f"{path}: expected a CSV with an utterance_id column")
    return {r["utterance_id"]: r for r in rows}


def _label_of(rows, utt, column, path):
    if utt not in rows:
        raise DataError(f"{path}: no label row for utterance {utt}")
    if column not in rows[utt]:
        raise DataError(f"{path}: no column {column!r}")
    return rows[utt][column]


def _select(vectors, rows, split):
    if split and rows and "split" in next(iter(rows.values())):
        return [v for v in vectors if v.utterance_id in rows and rows[v.utterance_id]["split"] == split]
    return list(vectors)


def _write(path, text):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


# -- subcommands -------------------------------------------------------------

def cmd_synth(a):
    spec = CorpusSpec(ubm_speakers=a.ubm_speakers, ubm_utts_per_speaker=a.ubm_utts_per_speaker,
                      task_speakers=a.speakers, train_utts_per_speaker=a.utts_per_speaker,
                      test_utts_per_speaker=a.test_utts_per_speaker, duration_s=a.duration,
                      male_ratio=a.male_ratio, n_channels=a.channels, cross_channel=a.cross_channel)
    manifest = generate_corpus(spec, a.out, seed=_seed(a.seed))
    print(f"wrote {len(manifest.records)} utterances to {a.out}")


def cmd_features(a):
    wavs = sorted(glob.glob(os.path.join(a.input, "**", "*.wav"), recursive=True)) if os.path.isdir(a.input) else [a.input]
    if not wavs:
        raise DataError(f"no .wav files under {a.input}")
    fe = load_config(a.config).frontend if a.config else None
    opts = {} if fe is None else dict(frame_len=fe.frame_len, frame_shift=fe.frame_shift, preemphasis=fe.preemphasis,
                                      n_mels=fe.n_mels, n_ceps=fe.n_ceps, vad_threshold_db=fe.vad_threshold_db,
                                      frames_per_utterance=fe.frames_per_utterance)
    os.makedirs(a.out, exist_ok=True)
    for path in wavs:
        save_features(os.path.join(a.out, _stem(path) + ".ivxf"), extract_features(read_wav(path), **opts))
    print(f"wrote {len(wavs)} feature files to {a.out}")


def cmd_train_ubm(a):
    frames = np.vstack([load_features(p).voiced for p in _feature_files(a.features)])
    gmm, trace = train_ubm(frames, a.components, iters=a.iters, seed=_seed(a.seed))
    save_gmm(a.out, gmm)
    print(f"UBM C={gmm.n_components} D={gmm.dim}: {len(trace) - 1} iterations, log-likelihood {trace[-1]:.6f}")


def _stats_for(gmm, files, rows=None):
    out = []
    for p in files:
        utt = _stem(p)
        row = (rows or {}).get(utt, {})
        st = accumulate_stats(gmm, load_features(p), utt, row.get("speaker_id", ""), row.get("channel_id", ""))
        out.append(center_stats(st, gmm))
    return out


def cmd_train_tv(a):
    gmm = load_gmm(a.ubm)
    stats = _stats_for(gmm, _feature_files(a.features))
    model, trace = train_tv(gmm, stats, rank=a.rank, iters=a.iters, seed=_seed(a.seed), mstep=a.mstep)
    save_tv(a.out, model)
    print(f"T {model.t_matrix.shape}: objective {trace['loglik'][0]:.3f} -> {trace['loglik'][-1]:.3f}")


def cmd_extract(a):
    ubm_path = a.ubm or os.path.join(os.path.dirname(os.path.abspath(a.tv)), "ubm.ivxg")
    if not os.path.exists(ubm_path):
        raise DataError(f"UBM file {ubm_path} not found (pass --ubm)")
    gmm = load_gmm(ubm_path)
    model = load_tv(a.tv, gmm)
    rows = read_labels(a.labels) if a.labels else None
    ivecs = [extract_ivector(model, st) for st in _stats_for(gmm, _feature_files(a.features), rows)]
    save_ivectors(a.out, ivecs)
    print(f"wrote {len(ivecs)} i-vectors of dimension {model.rank} to {a.out}")


def cmd_train_sae(a):
    ivecs = load_ivectors(a.ivecs)
    if a.labels:
        ivecs = _select(ivecs, read_labels(a.labels), a.split)
    x = np.array([iv.w for iv in ivecs])
    cfg = TrainConfig(learning_rate=a.lr, epochs=a.epochs, batch_size=a.batch_size, seed=_seed(a.seed),
                      pretrain_epochs=a.pretrain_epochs)
    model, trace = train_sae(x, a.layers, cfg, activation=a.activation, tied=a.tied)
    save_sae(a.out, model)
    print(f"SAE {model.architecture}: loss {trace[0]:.5f} -> {trace[-1]:.5f}")


def cmd_encode(a):
    model = load_sae(a.sae)
    ivecs = load_ivectors(a.ivecs)
    if not ivecs:
        raise DataError(f"{a.ivecs} holds no vectors")
    codes = encode_raw(model, np.array([iv.w for iv in ivecs]))
    save_ivectors(a.out, [IVector(c, iv.utterance_id, iv.speaker_id, iv.channel_id) for c, iv in zip(codes, ivecs)])
    print(f"wrote {len(ivecs)} codes of dimension {model.code_dim} to {a.out}")


def cmd_train_clf(a):
    rows = read_labels(a.labels)
    codes = _select(load_ivectors(a.codes), rows, a.split)
    if not codes:
        raise DataError("no training vectors selected")
    x = np.array([c.w for c in codes])
    y = [_label_of(rows, c.utterance_id, a.label_column, a.labels) for c in codes]
    seed = _seed(a.seed)
    if a.kind == "svm":
        model, _ = train_linear_margin(x, y, reg_c=a.reg_c, epochs=a.epochs or 200, seed=seed)
    else:
        cfg = MlpConfig(hidden_dim=a.hidden_dim, learning_rate=a.lr, epochs=a.epochs or 500,
                        batch_size=a.batch_size, seed=seed)
        model, _ = train_mlp(x, y, cfg)
    save_classifier(a.out, model)
    print(f"{a.kind} over {len(model.codec)} classes trained on {len(y)} vectors")


def cmd_predict(a):
    model = load_classifier(a.clf, a.hidden_dim)
    codes = load_ivectors(a.codes)
    if a.labels:
        codes = _select(codes, read_labels(a.labels), a.split)
    scores = model.score(np.array([c.w for c in codes]))
    pred = [model.codec.classes[i] for i in np.argmax(scores, axis=1)]
    _write(a.out, predictions_csv([c.utterance_id for c in codes], pred, scores, model.codec.classes))


def _evaluate_and_write(task, classes, scores, y_true, out, provenance=None):
    metrics, pred = evaluate_scores(task, classes, scores, y_true)
    _write(out, report(metrics, **(provenance or {})))
    stem = os.path.splitext(out)[0]
    if task == "binary" and "roc" in metrics:
        _write(stem + "_roc.csv", roc_csv(metrics["roc"]))
    elif task == "multiclass":
        _write(stem + "_confusion.csv", confusion_csv(metrics))
    return metrics, pred


def cmd_baseline(a):
    rows = read_labels(a.labels)
    train = load_ivectors(a.ivecs)
    if not a.test:
        train = _select(train, rows, "train")
    x = np.array([iv.w for iv in train])
    y = [_label_of(rows, iv.utterance_id, a.label_column, a.labels) for iv in train]
    backend = CosineBackend.fit(x, y, a.lda_dim)
    if a.model_out:
        with open(a.model_out, "wb") as fh:
            fh.write(transform_to_bytes(backend.lda, backend.wccn))
    test = load_ivectors(a.test) if a.test else _select(load_ivectors(a.ivecs), rows, "test")
    if not test:
        raise DataError("no test vectors for the baseline")
    y_test = [_label_of(rows, iv.utterance_id, a.label_column, a.labels) for iv in test]
    metrics, _ = _evaluate_and_write(a.task, backend.classes, backend.score(np.array([iv.w for iv in test])),
                                     y_test, a.report)
    print(_summary(metrics))


def cmd_evaluate(a):
    with open(a.pred, newline="") as fh:
        preds = list(csv.DictReader(fh))
    if not preds:
        raise DataError(f"{a.pred}: no predictions")
    truth = read_labels(a.truth)
    score_cols = [k for k in preds[0] if k.startswith("score_")]
    y_true = [_label_of(truth, p["utterance_id"], a.label_column, a.truth) for p in preds]
    classes = sorted(set(y_true) | {p["predicted"] for p in preds})
    if score_cols:
        classes = [k[len("score_"):] for k in score_cols]
        scores = np.array([[float(p[k]) for k in score_cols] for p in preds])
    else:
        # hard decisions only: one-hot scores
        scores = np.array([[1.0 if p["predicted"] == c else 0.0 for c in classes] for p in preds])
    metrics, _ = _evaluate_and_write(a.task, classes, scores, y_true, a.out)
    print(_summary(metrics))


def cmd_run(a):
    cfg = load_config(a.config, _overrides(a))
    record = run_pipeline(cfg, until=a.until)
    cached = sum(record.cached.values())
    print(f"config {record.config_hash}: {len(record.cached)} stages ({cached} cached)")
    if record.report_path:
        with open(record.report_path) as fh:
            print(_summary(json.load(fh)["metrics"]))


def cmd_compare(a):
    cfg = load_config(a.config, _overrides(a))
    doc = compare_backends(cfg)
    for backend, subsets in sorted(doc["summary"].items()):
        print(backend + ": " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(subsets.items())))


def _overrides(a):
    out = {}
    for item in a.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    if a.workdir:
        out["workdir"] = a.workdir
    return out


def _summary(metrics):
    if metrics.get("task") == "binary":
        auc = metrics.get("auc")
        return f"ACC {metrics['acc']:.4f}  AUC {auc if auc is None else format(auc, '.4f')}  MCC {metrics['mcc']:.4f}"
    return f"recognition rate {metrics['recognition_rate']:.4f} (chance {metrics['chance']:.4f})"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivx", description="i-vector speaker modelling with stacked auto-encoders")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--speakers", type=int, default=20, help="task (enrollment/test) speakers")
    s.add_argument("--utts-per-speaker", type=int, default=10, help="training utterances per task speaker")
    s.add_argument("--test-utts-per-speaker", type=int, default=5)
    s.add_argument("--ubm-speakers", type=int, default=10)
    s.add_argument("--ubm-utts-per-speaker", type=int, default=4)
    s.add_argument("--duration", type=float, default=10.0, help="seconds per utterance")
    s.add_argument("--male-ratio", type=float, default=0.5)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--cross-channel", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="MFCC + VAD + CMVN for WAV files")
    s.add_argument("--in", dest="input", required=True, help="WAV file or directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="take frontend settings from a pipeline config")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train-ubm", help="train the diagonal GMM UBM")
    s.add_argument("--features", required=True)
    s.add_argument("--components", type=int, default=64)
    s.add_argument("--iters", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_ubm)

    s = sub.add_parser("train-tv", help="train the total-variability matrix")
    s.add_argument("--ubm", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--rank", type=int, default=400)
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--mstep", choices=("ml", "paper-literal"), default="ml")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_tv)

    s = sub.add_parser("extract", help="extract i-vectors")
    s.add_argument("--tv", required=True)
    s.add_argument("--ubm", help="UBM the TV model was trained on (default: ubm.ivxg beside --tv)")
    s.add_argument("--features", required=True)
    s.add_argument("--labels", help="CSV with speaker_id/channel_id columns to attach")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-sae", help="train the stacked auto-encoder")
    s.add_argument("--ivecs", required=True)
    s.add_argument("--layers", type=_int_list, default=[200, 40])
    s.add_argument("--activation", choices=("sigmoid", "identity"), default="sigmoid")
    s.add_argument("--tied", action="store_true")
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--pretrain-epochs", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--labels", help="restrict training to --split rows of this CSV")
    s.add_argument("--split", default="train")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_sae)

    s = sub.add_parser("encode", help="map i-vectors to SAE codes")
    s.add_argument("--sae", required=True)
    s.add_argument("--ivecs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train-clf", help="train a classifier on codes")
    s.add_argument("--kind", choices=("svm", "mlp"), default="mlp")
    s.add_argument("--codes", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--label-column", default="speaker_id")
    s.add_argument("--split", default="train", help="rows of --labels to train on (if it has a split column)")
    s.add_argument("--hidden-dim", type=int, default=64)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--epochs", type=int, default=0, help="0 selects the classifier default")
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--reg-c", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_clf)

    s = sub.add_parser("predict", help="score codes with a trained classifier")
    s.add_argument("--clf", required=True)
    s.add_argument("--codes", required=True)
    s.add_argument("--hidden-dim", type=int)
    s.add_argument("--labels")
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("baseline", help="LDA/WCCN/cosine back-end")
    s.add_argument("--ivecs", required=True, help="training i-vectors (or all, split by --labels)")
    s.add_argument("--labels", required=True)
    s.add_argument("--test", help="test i-vectors (default: test split of --ivecs)")
    s.add_argument("--label-column", default="", help="default: gender for binary, speaker_id otherwise")
    s.add_argument("--task", choices=("binary", "multiclass"), default="multiclass")
    s.add_argument("--lda-dim", type=int)
    s.add_argument("--model-out")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("evaluate", help="metrics for a predictions CSV")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--task", choices=("binary", "multiclass"), required=True)
    s.add_argument("--label-column", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    for name, func, text in (("run", cmd_run, "run the full pipeline"),
                             ("compare", cmd_compare, "compare SAE and LDA back-ends")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--workdir")
        s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        if name == "run":
            s.add_argument("--until", default="evaluate")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "label_column", None) == "":
        args.label_column = "gender" if args.task == "binary" else "speaker_id"
    try:
        args.func(args)
    except IvxError as exc:
        print(f"ivx {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"ivx {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
