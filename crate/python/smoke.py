"""Smoke test for the Python bindings.

    pip install maturin
    pip install --no-build-isolation ./crates/py
    python python/smoke.py
"""
import json
import math

import tpdr


def main():
    face = tpdr.FaceModel.toy()
    zeros = {"z_shp": [0.0] * face.shape_rank, "z_exp": [0.0] * face.expr_rank}
    verts = face.compute_vertices(json.dumps(zeros))
    assert len(verts) == face.num_vertices
    assert face.avd(json.dumps(zeros), json.dumps(zeros)) == 0.0

    scene = tpdr.Scene.generate("textured_head", seed=3, resolution=16)
    assert len(scene) >= 2

    config = {
        "width": 16, "height": 16, "samples_per_ray": 8,
        "led": {"latent": 4, "secc_size": 32},
    }
    model = tpdr.Model(json.dumps(config), seed=0)
    report = json.loads(model.train(scene, json.dumps({"steps": 30, "batch_rays": 64})))
    assert report["steps"] == 30 and math.isfinite(report["final_loss"])

    cam = scene.camera(0)
    rgb, alpha = model.render(cam)
    assert len(rgb) == 3 * len(alpha) == 3 * 16 * 16
    smile = [1.5] + [0.0] * (face.expr_rank - 1)
    rgb2, _ = model.render(cam, z_exp=smile)
    assert rgb2 != rgb

    m = json.loads(tpdr.metrics(rgb, rgb, 16, 16))
    assert m["psnr_masked"] == "inf" and m["ssim"] == 1.0
    assert json.loads(tpdr.gradcheck("head"))["passed"]

    big = model.render(cam.resized(24, 24).orbit(0.3))[1]
    assert len(big) == 24 * 24

    try:
        tpdr.Model.load("/nonexistent/model.ckpt")
    except OSError as e:
        assert "[io]" in str(e)
    else:
        raise AssertionError("loading a missing checkpoint succeeded")
    print("smoke ok:", report["evals"])


if __name__ == "__main__":
    main()
