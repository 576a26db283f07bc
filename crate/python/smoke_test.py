"""Smoke test for the Python bindings.

Build and install first:

    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/mmsurv-*.whl
    python python/smoke_test.py
"""

import os
import random
import tempfile

import mmsurv


def main():
    healthy = dict(
        age=30, heart_rate=80, systolic_bp=120, temperature=37, pao2_fio2=None,
        bun=10, urine_output=1500, sodium=140, potassium=4, bicarbonate=24,
        bilirubin=1, wbc=8, gcs=15, chronic_disease="none",
        admission_type="scheduled_surgical",
    )
    total, parts = mmsurv.saps_score(healthy)
    assert total == 0 and len(parts) == 15
    total, parts = mmsurv.saps_score(dict(healthy, age=65, chronic_disease="aids"))
    assert total == 29 and parts["age"] == 12

    times = [1.0, 2.0, 3.0, 4.0]
    events = [True, True, False, True]
    c = mmsurv.c_index(times, events, [4.0, 3.0, 2.0, 1.0])
    assert c["value"] == 1.0 and c["comparable_pairs"] == 5
    assert mmsurv.c_index(times, events, [1.0] * 4)["value"] == 0.5
    assert mmsurv.cox_nll([0.0] * 4, times, events) > 0

    rng = random.Random(0)
    x = [[rng.gauss(0, 1)] for _ in range(200)]
    t = [rng.expovariate(0.1 * pow(2.718281828, 0.7 * row[0])) for row in x]
    model = mmsurv.fit_coxph(x, t, [True] * 200, names=["x"])
    assert model.converged and abs(model.beta[0] - 0.7) < 0.3
    assert model.hazard_report()[0]["covariate"] == "x"

    feats = mmsurv.gcn_features([[rng.gauss(0, 1) for _ in range(768)] for _ in range(8)])
    assert len(feats) == 224

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "cohort.jsonl")
        risks = mmsurv.synth(path, 150, seed=1)
        assert len(risks) == 150
        data = mmsurv.Dataset.load(path)
        assert len(data) == 150 and len(data.matrix("text")[0]) == 768

        net = mmsurv.FusionModel.train(data, "multimodal_text_image", epochs=3, seed=2)
        ckpt = os.path.join(tmp, "model.json")
        net.save(ckpt)
        back = mmsurv.FusionModel.load(ckpt)
        assert back.variant == "multimodal_text_image"
        assert back.predict(data) == net.predict(data)

        summary = mmsurv.bootstrap(data, "saps_scores", b=3, seed=4)
        assert len(summary["values"]) == 3 and summary["failures"] == 0

    print("python smoke test passed")


if __name__ == "__main__":
    main()
