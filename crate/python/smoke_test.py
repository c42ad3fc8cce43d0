#!/usr/bin/env python3
"""Smoke test for the hlstm_py extension module.

Builds nothing itself: run `cargo build -p hlstm-py [--release]` first.
The script locates the cdylib under target/, exposes it as an importable
module, and exercises the tensor core and the full pipeline on a tiny
synthetic corpus.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_extension():
    candidates = [
        ROOT / "target" / "release" / "libhlstm_py.so",
        ROOT / "target" / "debug" / "libhlstm_py.so",
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("build the extension first: cargo build -p hlstm-py")
    stage = Path(tempfile.mkdtemp(prefix="hlstm_py_"))
    shutil.copy(built[0], stage / "hlstm_py.so")
    sys.path.insert(0, str(stage))
    import hlstm_py

    return hlstm_py


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"  {name}: {status} {detail}".rstrip())
    if not ok:
        sys.exit(1)


def main():
    m = import_extension()
    print("tensor core")

    t = m.Tensor([2, 2], [1.0, 2.0, 3.0, 4.0])
    check("tensor shape/data", t.shape == [2, 2] and t.tolist() == [1.0, 2.0, 3.0, 4.0])

    tape = m.Tape()
    w = tape.param(m.Tensor([2], [0.5, -1.0]))
    x = m.Tensor([2], [2.0, 3.0])
    prod = tape.mul(w, x)
    loss = tape.sum(prod)
    tape.backward(loss)
    grad = tape.grad(w)
    check(
        "gradient of sum(w*x) is x",
        grad is not None and grad.tolist() == [2.0, 3.0],
        f"grad={grad.tolist()}",
    )

    tape2 = m.Tape()
    s = tape2.sigmoid(m.Tensor([1], [0.0]))
    check("sigmoid(0) = 0.5", abs(s.item() - 0.5) < 1e-15)

    probs = m.Tape().softmax(m.Tensor([3], [1.0, 2.0, 3.0]))
    check(
        "softmax sums to one",
        abs(sum(probs.tolist()) - 1.0) < 1e-9,
        f"probs={[round(p, 4) for p in probs.tolist()]}",
    )

    err = m.gradient_check()
    check("autodiff matches finite differences", err < 1e-6, f"max rel err={err:.2e}")

    print("pipeline")
    work = Path(tempfile.mkdtemp(prefix="hlstm_smoke_"))
    train_path, test_path = m.synth(
        str(work / "data"), train_reviews=30, test_reviews=10, ambiguity=0.4, seed=11
    )
    check("synthetic corpora written", Path(train_path).exists() and Path(test_path).exists())

    report = m.train(
        train_path,
        str(work / "run"),
        model="hlstm",
        seed=11,
        epochs=12,
        hidden=8,
        word_dim=8,
        aspect_dim=3,
        val_fraction=0.0,
    )
    check(
        "training ran",
        report["stopping_epoch"] >= 1 and len(report["epochs"]) == report["stopping_epoch"],
        f"best_epoch={report['best_epoch']} stopped={report['stopping_epoch']}",
    )
    losses = [e["train_loss"] for e in report["epochs"]]
    check(
        "loss moved below the uniform level",
        min(losses) < math.log(3.0),
        f"min loss={min(losses):.4f}",
    )

    metrics = m.evaluate(report["checkpoint"], test_path)
    check(
        "evaluation reports accuracy and confusion",
        0.0 <= metrics["accuracy"] <= 1.0 and len(metrics["confusion"]) == 3,
        f"accuracy={metrics['accuracy']:.3f} on {metrics['instances']} instances",
    )

    preds = m.predict(report["checkpoint"], test_path)
    check(
        "predictions cover the test instances",
        len(preds) == metrics["instances"]
        and all(p[3] in ("positive", "negative", "neutral") for p in preds),
        f"{len(preds)} records",
    )
    again = m.predict(report["checkpoint"], test_path)
    check("prediction is deterministic", preds == again)

    print("smoke test passed")


if __name__ == "__main__":
    main()
