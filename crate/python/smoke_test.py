"""Smoke test for the bsap extension module.

Build and install first:

    cd crates/py && maturin build --release -o dist && pip install dist/*.whl
"""

import json
import math
import os
import tempfile

import bsap


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    p = bsap.balanced_score(2.0, 1.0)
    check(abs(p - 1.0 / (1.0 + math.exp(-1.0))) < 1e-12, "balanced_score")
    check(0.0 < bsap.balanced_score(-18000.0, 18000.0) < 1.0, "balanced_score extremes")

    s = bsap.normalize([1.0, 2.0, 3.0])
    check(abs(sum(s) - 1.0) < 1e-12 and s.index(max(s)) == 2, "softmax")
    check(bsap.normalize([4.0, 4.0], "minmax") == [0.5, 0.5], "minmax constant row")

    # raw prefers candidate 0; it is also close to the auxiliary prompt,
    # so the balanced score moves to candidate 1
    a2, a3 = 0.375, math.sqrt(1 - 0.375**2)
    k = math.sqrt(1 - 0.55**2)
    images = bsap.Matrix([[0.6, 0.8, 0.0], [0.55, k * a3, -k * a2]])
    aux = bsap.Matrix([[0.0, a2, a3]])
    raw, _, _ = bsap.predict([1.0, 0.0, 0.0], images)
    bal, scores, _ = bsap.predict([1.0, 0.0, 0.0], images, aux, mode="bsap")
    check(raw == 0 and bal == 1 and len(scores) == 2, "predict raw vs bsap")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.emb")
        images.save(path)
        back = bsap.Matrix.load(path)
        check(back.to_bytes() == images.to_bytes() and (back.rows, back.dim) == (2, 3), "EMB1 round trip")

    check(bsap.box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1.0 / 7.0, "box iou")
    runs = bsap.encode_mask([True, False, False, True], 2, 2)
    check(runs == [0, 1, 2, 1] and bsap.decode_mask((2, 2, runs)) == [True, False, False, True], "rle")
    pred = [(4, 4, [0, 4, 12]), (4, 4, [6, 6, 4])]
    gt = [(4, 4, [0, 4, 12]), (4, 4, [0, 6, 10])]
    check(bsap.oiou(pred, gt) == 0.25 and bsap.miou(pred, gt) == 0.5, "oiou / miou")

    report = json.loads(bsap.simulate("g1"))
    check(report["raw_accuracy"] <= 40 and report["bsap_accuracy"] >= 95, "g1 simulation")

    prompts = bsap.build_catalog()
    check(len(prompts) == 180 and prompts[0] == "a photo of person", "prompt catalog")
    check(bsap.build_catalog(["coco80"], 2)[0] == "this is person", "template by query length")

    try:
        bsap.normalize([1.0], "bogus")
    except ValueError:
        check(True, "bad normalizer raises ValueError")
    else:
        check(False, "bad normalizer raises ValueError")


if __name__ == "__main__":
    main()
