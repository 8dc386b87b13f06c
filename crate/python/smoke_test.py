"""Smoke test for the `hoi` extension module.

Build and install it first:

    pip install --no-build-isolation ./crates/python
    python python/smoke_test.py
"""

import math
import pathlib
import tempfile

import hoi


def check_geometry():
    a = hoi.Box(0.0, 0.0, 0.2, 0.2)
    b = hoi.Box(0.1, 0.1, 0.3, 0.3)
    assert math.isclose(a.iou(b), 1 / 7, rel_tol=1e-12)
    assert math.isclose(a.giou(b), 1 / 7 - 2 / 9, rel_tol=1e-12)
    human = hoi.Box.from_tlwh(0.1, 0.2, 0.4, 0.2)
    obj = hoi.Box.from_tlwh(0.3, 0.24, 0.2, 0.1)
    r = hoi.rsc(human, obj)
    assert all(math.isclose(x, y, abs_tol=1e-12) for x, y in zip(r, [0.5, 0.2, -math.log(2), -math.log(2)]))
    back = hoi.apply_rsc(human, r)
    assert all(math.isclose(x, y, abs_tol=1e-12) for x, y in zip(back.corners, obj.corners))
    try:
        hoi.Box(0.5, 0.5, 0.4, 0.9)
    except ValueError:
        pass
    else:
        raise AssertionError("degenerate box accepted")


def check_assignment_and_ap():
    assert hoi.hungarian([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]]) == [1, 0]
    assert math.isclose(hoi.average_precision([True, False, True], 2), 5 / 6, rel_tol=1e-12)
    maps = hoi.rasterize(hoi.Box(0.0, 0.0, 0.5, 0.5), None, 4)
    assert sum(map(sum, maps[0])) == 4 and sum(map(sum, maps[1])) == 0


def check_training(workdir: pathlib.Path):
    data = hoi.Dataset.synth(seed=3, n_images=4, image_size=16, max_instances=2)
    assert len(data) == 4
    data.save(workdir / "train.json")
    assert '"mode"' in data.fit_stats("multivariate")
    config = workdir / "micro.toml"
    config.write_text(
        "\n".join(
            [
                "epochs = 2",
                "batch_size = 2",
                "[data]",
                'train = "train.json"',
                "[model]",
                "d = 8",
                "encoder_layers = 1",
                "refiner_layers = 1",
                "decoder_layers = 1",
                "heads = 2",
                "num_queries = 4",
                "top_k = 2",
                "ffn_dim = 8",
                "image_size = 16",
                "map_size = 13",
            ]
        )
    )
    summary = hoi.train(config, workdir / "run", ["lr=0.002"])
    assert summary["steps"] == 4, summary
    model = hoi.Model.load(workdir / "run" / "final.ckpt")
    predictions = model.predict(data)
    assert len(predictions) == 4 and len(predictions[0]["queries"]) == 4
    report = model.evaluate(data, scenario=2, class_mode="pair")
    assert 0.0 <= report["map"] <= 1.0
    try:
        hoi.train(config, workdir / "bad", ["model.heads=3"])
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")


if __name__ == "__main__":
    check_geometry()
    check_assignment_and_ap()
    with tempfile.TemporaryDirectory() as tmp:
        check_training(pathlib.Path(tmp))
    print("python smoke test passed")
