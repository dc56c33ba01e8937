"""Smoke test for the laof_lab extension.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import json
import sys
import tempfile

import laof_lab


def main() -> int:
    zero = laof_lab.flow_to_rgb(8, 8, [0.0] * 128, 0.01)
    assert zero == bytes(8 * 8 * 3)

    uv = [0.25, -1.5] * 64
    w, h, back = laof_lab.decode_flo(laof_lab.encode_flo(8, 8, uv))
    assert (w, h, back) == (8, 8, uv)

    env = laof_lab.Env(seed=0)
    frame0 = env.render()
    steps = 0
    while not env.step(env.expert_action()):
        steps += 1
        assert steps < 64, "expert did not reach the goal"
    print(f"expert reached the goal in {steps + 1} steps")

    h, w = env.shape
    flow = laof_lab.estimate_flow_hs(w, h, frame0, frame0)
    assert max(abs(x) for x in flow) < 1e-6

    for name, cases, err in laof_lab.gradient_suite(3, 0):
        assert err < 1e-2, (name, err)

    config = {
        "data": {"n_transitions": 400},
        "variants": ["LAPO", "LAOF"],
        "seeds": 2,
        "stage": {
            "epochs": 1,
            "model": {"hidden": 16, "latent_dim": 4, "codebook_size": 8, "task_embed_dim": 2},
            "probe": {"epochs": 1},
        },
    }
    with tempfile.TemporaryDirectory() as out:
        table = json.loads(laof_lab.run_sweep(json.dumps(config), out))
        assert len(table["rows"]) == 4
        summary = json.loads(laof_lab.summarize(f"{out}/table.json"))
        for cell in summary["cells"]:
            print(f"{cell['variant']:>5}  {cell['mean']:.3f} +- {cell['std']:.3f}")
        model = laof_lab.Model.load(f"{out}/cells/LAOF-r0-ldefault-s0")
        assert model.variant == "LAOF" and model.stages == ["pretrain"]

    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
