"""End-to-end acceptance criteria, one test per criterion.

Each test returns ``(passed, detail)``; the ``criterion`` decorator records a
PASS/FAIL line (printed in the terminal summary) and fails the test when the
criterion is not met.  Criteria 6, 7 and 10-12 train real models and take
several minutes in total on one core.
"""

import functools
import os
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from densepipe import ops
from densepipe.checkpoint import (decode_checkpoint, encode_checkpoint, load_model,
                                  model_from_checkpoint, save_checkpoint)
from densepipe.cli import main as cli_main
from densepipe.data import (DatasetManifest, ManifestEntry, SplitSpec, kfold, load_dataset,
                            stratified_split)
from densepipe.errors import CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError
from densepipe.evaluate import confusion, f1_score, metrics, predict_labels
from densepipe.explain import box_mass_fraction, gradcam, upsample_bilinear
from densepipe.gradcheck import grad_check
from densepipe.model import DenseNetConfig, HeadConfig, build_model, forward, infer_logits
from densepipe.synth import synth_generate
from densepipe.tensor import Rng
from densepipe.train import FreezePolicy, TrainConfig, evaluate_loss, train, transfer

RESULTS = {}

# criterion 6 settings; the epoch cap keeps one run inside the 10-minute budget
E2E_SEED = 42
E2E_EPOCHS = 10
E2E_SIZES = {"train": 2000, "val": 500, "test": 500}


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                passed, detail = fn(*args, **kwargs)
            except Exception as exc:
                RESULTS[number] = (title, False, f"{type(exc).__name__}: {exc}")
                raise
            RESULTS[number] = (title, bool(passed), detail)
            print(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {title} | {detail}")
            assert passed, detail
        return run
    return wrap


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
             for n, (title, ok, detail) in sorted(RESULTS.items())]
    if reporter is not None:
        reporter.write_sep("=", "acceptance criteria")
        for line in lines:
            reporter.write_line(line)
    else:
        print("\n".join(lines))


def rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


# --------------------------------------------------------------- 1


def _bn_op(fn, mode, c):
    mean, var = np.linspace(-0.3, 0.3, c), np.linspace(0.6, 1.4, c)

    def op(a, g, b):
        return fn(a, ops.BatchNormState(g, b, mean, var), mode)[0]

    return op


def _grad_cases(seed):
    labels = np.array([0, 2, 1, 1])
    weights = np.array([0.6, 1.7, 1.1])
    x = rand((2, 3, 5, 5), seed)
    return [
        ("conv2d 3x3 s1 p1", lambda a, w, b: ops.conv2d(a, w, b, 1, 1),
         [x, rand((4, 3, 3, 3), seed + 10), rand(4, seed + 20)], 1e-4),
        ("conv2d 3x3 s2 p1", lambda a, w, b: ops.conv2d(a, w, b, 2, 1),
         [x, rand((2, 3, 3, 3), seed + 11), rand(2, seed + 21)], 1e-4),
        ("conv2d 1x1", lambda a, w, b: ops.conv2d(a, w, b, 1, 0),
         [x, rand((4, 3, 1, 1), seed + 12), rand(4, seed + 22)], 1e-4),
        ("batch_norm train", _bn_op(ops.batch_norm, "train", 3),
         [x, rand(3, seed + 13) + 1.5, rand(3, seed + 23)], 1e-4),
        ("batch_norm eval", _bn_op(ops.batch_norm, "eval", 3),
         [x, rand(3, seed + 14) + 1.5, rand(3, seed + 24)], 1e-4),
        ("batch_norm_relu train", _bn_op(ops.batch_norm_relu, "train", 3),
         [x, rand(3, seed + 15) + 1.5, rand(3, seed + 25)], 1e-4),
        ("relu", ops.relu, [x], 1e-4),
        ("dropout train", lambda a: ops.dropout(a, 0.3, "train", Rng(seed)), [x], 1e-4),
        ("concat_channels", lambda a, b: ops.concat_channels([a, b]),
         [x, rand((2, 2, 5, 5), seed + 16)], 1e-4),
        ("softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, labels, weights),
         [rand((4, 3), seed + 17)], 1e-4),
        ("avg_pool", lambda a: ops.avg_pool(a), [rand((2, 3, 4, 6), seed + 18)], 1e-6),
        ("global_avg_pool", ops.global_avg_pool, [x], 1e-6),
        ("dense", ops.dense, [rand((3, 5), seed + 19), rand((5, 4), seed + 29), rand(4, seed + 39)],
         1e-6),
    ]


@criterion(1, "gradient fidelity of every layer op, seeds 1-5")
def test_criterion_01_gradient_fidelity():
    t0 = time.perf_counter()
    failures, worst = [], {}
    for seed in range(1, 6):
        for name, op, inputs, tol in _grad_cases(seed):
            # the projection seed must differ from the input seeds: with R == x the
            # train-mode batch-norm gradient collapses to O(eps) and the check degenerates
            rep = grad_check(op, inputs, tol, seed=1000 + seed)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
            if not rep.passed:
                failures.append(f"{name} seed {seed}: {rep.max_rel_error:.2e} ({rep.rejected})")
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    detail = (f"{len(worst)} ops x 5 seeds, worst {top} {worst[top]:.2e}, {elapsed:.1f} s"
              + (f"; failures: {failures}" if failures else ""))
    return not failures and elapsed < 120, detail


# --------------------------------------------------------------- 2


@criterion(2, "DenseNet121 channel accounting 256/512/1024/1024")
def test_criterion_02_channel_accounting():
    k0, blocks, k, theta = 64, [6, 12, 24, 16], 32, 0.5
    closed, c = [], k0
    for i, n in enumerate(blocks):
        c = c + n * k
        closed.append(c)
        if i < len(blocks) - 1:
            c = int(np.floor(theta * c))
    cfg = DenseNetConfig.densenet121(input_resolution=32, in_channels=1)
    model = build_model(cfg)
    structural = []
    for concat in model.block_outputs():
        summed = sum(model.node(src).out_channels for src in concat.inputs)
        structural.append(summed if summed == concat.out_channels else -1)
    _, cache = forward(model, np.zeros((1, 1, 32, 32)), "eval")
    measured = [cache[n.name].shape[1] for n in model.block_outputs()]
    expected = [256, 512, 1024, 1024]
    ok = closed == structural == measured == expected
    return ok, f"closed form {closed}, graph {structural}, forward {measured}"


# --------------------------------------------------------------- 3


@criterion(3, "metric oracle on 1,000 random vectors and Table 11 F1")
def test_criterion_03_metric_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 501))
        a, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
        tp = int(np.sum((a == 0) & (p == 0)))
        fn = int(np.sum((a == 0) & (p == 1)))
        fp = int(np.sum((a == 1) & (p == 0)))
        tn = int(np.sum((a == 1) & (p == 1)))
        div = lambda x, y: x / y if y else 0.0
        prec, rec = div(tp, tp + fp), div(tp, tp + fn)
        oracle = dict(accuracy=(tp + tn) / n, precision=prec, recall=rec,
                      specificity=div(tn, tn + fp), f1=div(2 * prec * rec, prec + rec))
        cm = confusion(a, p)
        if (cm.tp, cm.fn, cm.fp, cm.tn) != (tp, fn, fp, tn):
            return False, f"cell mismatch at n={n}"
        got = metrics(cm).as_dict()
        worst = max(worst, max(abs(got[k] - v) for k, v in oracle.items()))
    f1 = f1_score(0.9680, 0.9769)
    ok = worst <= 1e-12 and abs(f1 - 0.9725) <= 1e-4
    return ok, f"max oracle deviation {worst:.1e}; Table 11 f1 {f1:.4f}"


# --------------------------------------------------------------- 4


@criterion(4, "Table 4 stratified split counts")
def test_criterion_04_split_counts():
    entries = [ManifestEntry(f"f{i}.pgm", "female") for i in range(14000)]
    entries += [ManifestEntry(f"m{i}.pgm", "male") for i in range(10000)]
    train_m, val_m, test_m = stratified_split(DatasetManifest(entries), SplitSpec(seed=0))
    got = [(m.counts()["female"], m.counts()["male"]) for m in (train_m, val_m, test_m)]
    female, male = [g[0] for g in got], [g[1] for g in got]
    ok = female == [8960, 2240, 2800] and male == [6400, 1600, 2000]
    return ok, f"female {female}, male {male}"


# --------------------------------------------------------------- 5


@criterion(5, "5-fold partition of 19,200 rows")
def test_criterion_05_kfold():
    entries = [ManifestEntry(f"f{i}.pgm", "female") for i in range(11200)]
    entries += [ManifestEntry(f"m{i}.pgm", "male") for i in range(8000)]
    manifest = DatasetManifest(entries)
    folds = kfold(manifest, 5, seed=0)
    sizes = [(len(t), len(v)) for t, v in folds]
    vals = [{e.path for e in v.entries} for _, v in folds]
    partition = (sum(len(v) for v in vals) == len(manifest)
                 and set.union(*vals) == {e.path for e in entries})
    disjoint_train = all(not ({e.path for e in t.entries} & vals[i])
                         for i, (t, _) in enumerate(folds))
    spread = max(max(c) - min(c) for c in
                 ([v.counts()[lab] for _, v in folds] for lab in ("female", "male")))
    ok = sizes == [(15360, 3840)] * 5 and partition and disjoint_train and spread <= 1
    return ok, f"sizes {sizes[0]} x5, partition {partition}, class spread {spread}"


# --------------------------------------------------------------- 6


def _e2e_data(root):
    t0 = time.perf_counter()
    sets = {}
    for variant, n in E2E_SIZES.items():
        manifest = synth_generate(n, 32, 0.5, E2E_SEED, os.path.join(root, variant), variant)
        sets[variant] = load_dataset(manifest, 32, 1, equalize=False)
    return sets, time.perf_counter() - t0


def _e2e_run(sets):
    cfg = DenseNetConfig.toy(head=HeadConfig([64], 0.5), seed=E2E_SEED)
    model = build_model(cfg)
    tcfg = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=E2E_EPOCHS, optimizer="adam",
                       seed=E2E_SEED)
    with threadpool_limits(limits=1):
        history, ckpt = train(model, sets["train"], sets["val"], tcfg)
        acc = float(np.mean(predict_labels(model, sets["test"]) == sets["test"].y))
    return model, history, ckpt, acc


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("e2e"))
    t0 = time.perf_counter()
    sets, gen_time = _e2e_data(root)
    model, history, ckpt, acc = _e2e_run(sets)
    elapsed = time.perf_counter() - t0
    return dict(root=root, sets=sets, model=model, history=history, ckpt=ckpt, acc=acc,
                elapsed=elapsed, gen_time=gen_time)


@criterion(6, "synthetic end-to-end accuracy, runtime and determinism")
def test_criterion_06_end_to_end(e2e):
    _, history2, _, acc2 = _e2e_run(e2e["sets"])
    identical = history2 == e2e["history"] and acc2 == e2e["acc"]
    ok = e2e["acc"] >= 0.95 and e2e["elapsed"] <= 600 and identical
    return ok, (f"test accuracy {e2e['acc']:.4f} after {len(e2e['history'])} epochs "
                f"(best {e2e['history'].best_epoch}), run {e2e['elapsed']:.0f} s "
                f"(data {e2e['gen_time']:.0f} s), second run identical: {identical}")


# --------------------------------------------------------------- 7


@criterion(7, "transfer from a pretrained backbone beats training from scratch")
def test_criterion_07_transfer(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("transfer"))
    source = load_dataset(synth_generate(5000, 32, 0.5, 7, os.path.join(root, "src"), "source"),
                          32, 1, equalize=False)
    target = load_dataset(synth_generate(200, 32, 0.5, 8, os.path.join(root, "tgt"), "target"),
                          32, 1, equalize=False)
    target_val = load_dataset(synth_generate(300, 32, 0.5, 9, os.path.join(root, "tval"),
                                             "target-val"), 32, 1, equalize=False)
    pre_val = target_val.subset(np.arange(100))
    with threadpool_limits(limits=1):
        base = build_model(DenseNetConfig.toy(seed=0))
        _, base_ckpt = train(base, source, pre_val,
                             TrainConfig(learning_rate=1e-3, epochs=2, seed=0,
                                         early_stop_patience=0))
        deltas, fine, scratch = [], [], []
        for seed in range(1, 6):
            budget = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=5, seed=seed,
                                 early_stop_patience=0)
            tuned = transfer(base_ckpt, HeadConfig([64], 0.5), 2, FreezePolicy("backbone"), seed)
            train(tuned, target, target_val, budget)
            fresh = build_model(DenseNetConfig.toy(seed=seed))
            train(fresh, target, target_val, budget)
            a = evaluate_loss(tuned, target_val.x, target_val.y)[1]
            b = evaluate_loss(fresh, target_val.x, target_val.y)[1]
            fine.append(a)
            scratch.append(b)
            deltas.append(a - b)
    ok = np.mean(fine) >= np.mean(scratch)
    return ok, (f"fine-tuned mean {np.mean(fine):.4f} vs scratch {np.mean(scratch):.4f}; "
                f"per-seed deltas {[round(d, 4) for d in deltas]}")


# --------------------------------------------------------------- 8


@criterion(8, "early stopping at best_epoch + patience with restore-best")
def test_criterion_08_early_stopping(e2e):
    tr = e2e["sets"]["train"].subset(np.arange(200))
    va = e2e["sets"]["val"].subset(np.arange(100))
    patience = 3
    reported = []

    def plateau(model, x, y, weights, batch_size):
        loss, acc = evaluate_loss(model, x, y, weights, batch_size)
        # real losses for three epochs, then a flat plateau at the best value so far
        reported.append(loss if len(reported) < 3 else min(reported))
        return reported[-1], acc

    cfg = TrainConfig(learning_rate=1e-3, epochs=30, seed=1, early_stop_patience=patience)
    model = build_model(DenseNetConfig.toy(seed=1))
    history, ckpt = train(model, tr, va, cfg, evaluator=plateau)
    restored = model_from_checkpoint(decode_checkpoint(encode_checkpoint(ckpt)))
    weights = ckpt.config["meta"]["class_weights"]
    val_loss = evaluate_loss(restored, va.x, va.y, weights, 64)[0]
    last = history.records[-1].epoch
    gap = abs(val_loss - min(history.val_losses))
    ok = history.stopped_early and last == history.best_epoch + patience and gap <= 1e-12
    return ok, (f"best epoch {history.best_epoch}, halted after epoch {last} "
                f"(patience {patience}), checkpoint loss gap {gap:.1e}")


# --------------------------------------------------------------- 9


@criterion(9, "checkpoint round trip and corruption errors")
def test_criterion_09_checkpoint(e2e, tmp_path):
    model = e2e["model"]
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    x = np.random.default_rng(9).random((100, 1, 32, 32))
    same = np.array_equal(infer_logits(model, x), infer_logits(load_model(path), x))
    raw = path.read_bytes()
    raised = {}
    for name, corrupt, err in (
            ("magic", b"PDTX" + raw[4:], CheckpointMagicError),
            ("version", raw[:4] + (2).to_bytes(4, "little") + raw[8:], CheckpointVersionError),
            ("truncation", raw[:len(raw) - 100], CheckpointTruncatedError)):
        try:
            decode_checkpoint(corrupt)
            raised[name] = "no error"
        except Exception as exc:  # record the exact class raised
            raised[name] = type(exc).__name__ if type(exc) is err else f"wrong {type(exc).__name__}"
    ok = same and all(v.startswith("Checkpoint") for v in raised.values())
    return ok, f"logits bit-identical {same}; errors {raised}"


# --------------------------------------------------------------- 10


@criterion(10, "Grad-CAM range and cue-box localization")
def test_criterion_10_gradcam(e2e):
    model, test = e2e["model"], e2e["sets"]["test"]
    pred = predict_labels(model, test)
    right = np.flatnonzero(pred == test.y)
    cams = gradcam(model, test.x[right], pred[right])
    peaks = cams.max(axis=(1, 2))
    in_range = bool(cams.min() >= 0 and np.all((peaks == 1.0) | (peaks == 0.0)))
    fractions = np.array([box_mass_fraction(upsample_bilinear(c, 32, 32), test.cues[i])
                          for c, i in zip(cams, right)])
    share = float(np.mean(fractions >= 0.6))
    per_class = {test.classes[k]: round(float(np.mean(fractions[test.y[right] == k] >= 0.6)), 3)
                 for k in (0, 1)}
    return in_range and share >= 0.7, (f"maps in [0,1] with unit peak {in_range}; "
                                       f"{share:.3f} of {len(right)} images have >=60% mass in "
                                       f"the cue box (per class {per_class})")


# --------------------------------------------------------------- 11


@criterion(11, "frozen backbone bit-identical after 5 epochs")
def test_criterion_11_frozen(e2e):
    model = transfer(e2e["ckpt"], HeadConfig([64], 0.5), 2, FreezePolicy("backbone"), seed=11)
    before = {k: model.params[k].data.copy() for k in model.backbone_param_names()}
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    head = {k: model.params[k].data.copy() for k in model.head_param_names()}
    cfg = TrainConfig(learning_rate=1e-3, epochs=5, seed=11, early_stop_patience=0)
    train(model, e2e["sets"]["train"].subset(np.arange(300)),
          e2e["sets"]["val"].subset(np.arange(100)), cfg)
    frozen_ok = all(np.array_equal(model.params[k].data, v) for k, v in before.items())
    stats_ok = all(np.array_equal(model.buffers[k], v) for k, v in buffers.items())
    head_moved = any(not np.array_equal(model.params[k].data, v) for k, v in head.items())
    return frozen_ok and head_moved, (f"{len(before)} backbone tensors unchanged {frozen_ok}; "
                                      f"BN statistics unchanged {stats_ok}; head updated "
                                      f"{head_moved}")


# --------------------------------------------------------------- 12


@criterion(12, "CLI resolution presets 96/128/224 produce reports")
def test_criterion_12_resolutions(tmp_path):
    outcomes = {}
    for res in (96, 128, 224):
        data, out = tmp_path / f"data{res}", tmp_path / f"run{res}"
        common = ["--architecture", "toy", "--resolution", str(res), "--seed", "5"]
        codes = [cli_main(["synth", "--n", "30", "--out-dir", str(data)] + common)]
        codes.append(cli_main(["train", "--manifest", str(data / "manifest.csv"), "--epochs", "1",
                               "--stem-stride", "2", "--stem-pool", "true", "--head", "16",
                               "--threads", "1", "--out-dir", str(out)] + common))
        files = all((out / f).exists() for f in ("metrics.csv", "history.csv", "confusion.txt",
                                                  "report.txt", "model.ckpt"))
        valid = False
        if files:
            row = (out / "metrics.csv").read_text().splitlines()[1].split(",")
            valid = all(0.0 <= float(v) <= 1.0 for v in row[:5]) and \
                load_model(out / "model.ckpt").config.input_resolution == res
        outcomes[res] = codes == [0, 0] and files and valid
    return all(outcomes.values()), f"per-resolution success {outcomes}"
