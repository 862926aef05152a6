"""Smoke test for the hingerl extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import hingerl


def check_kinematics():
    r, theta, omega = 0.4, 0.2, -0.15
    a = hingerl.twist_from_action(r, theta, omega)
    b = hingerl.transform_chain(r, theta, omega)
    assert max(abs(x - y) for x, y in zip(a, b)) < 1e-12
    w = hingerl.ideal_wrench(theta, 10.0, 1.0)
    assert hingerl.reward(r, theta, r, theta, w) == 0.0
    assert hingerl.reward(r, theta, r + 0.1, theta, w) < 0.0


def check_env_and_sim():
    env = hingerl.sample_env(7)
    assert set(env) == set(hingerl.field_names())
    assert all(-1.0 <= v <= 1.0 for v in hingerl.normalize_env(env))
    assert env == hingerl.sample_env(7)

    sim = hingerl.DoorSim(hingerl.mean_env())
    r, theta = sim.ground_truth()
    twist = hingerl.twist_from_action(r, theta, sim.target_speed)
    done = False
    while not done:
        obs, done = sim.step(twist)
        assert len(obs) == 12
    assert sim.step_index <= 500
    expected = abs(sim.target_speed) * 5.0 > math.radians(45)
    assert sim.success() == expected


def check_pipeline():
    vae, report = hingerl.train_vae(seed=1, samples=2000, epochs=2)
    assert report["heldout_mse"] > 0.0
    mu, sigma = vae.encode(hingerl.mean_env())
    assert len(mu) == 8 and all(s > 0 for s in sigma)

    policy, curve = hingerl.train_policy("dr", vae, steps=512, horizon=128, workers=2, seed=1)
    assert policy.mode == "dr" and len(curve) == 2

    module, mu_error = hingerl.train_adaptation(policy, vae, episodes=2, epochs=1, window=40)
    assert module.window == 40 and mu_error >= 0.0
    tuned, before, after = hingerl.finetune_adaptation(module, policy, vae, episodes=2, epochs=1)
    assert before >= 0.0 and after >= 0.0

    base = hingerl.evaluate(policy, vae, episodes=2, seed=3)
    adaptive = hingerl.evaluate(policy, module=tuned, episodes=2, seed=3)
    oracle = hingerl.evaluate(scripted="oracle", episodes=2, seed=3)
    for m in (base, adaptive, oracle):
        assert 0.0 <= m["success_rate"] <= 1.0
        assert m["force_p50"] <= m["force_p90"] <= m["force_max"]
    assert oracle["r_error_mean"] < 1e-12

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "policy.ckpt")
        policy.save(path)
        again = hingerl.evaluate(hingerl.Policy.load(path), vae, episodes=2, seed=3)
        assert again == base

    try:
        hingerl.train_policy("sideways")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown mode must raise")


if __name__ == "__main__":
    check_kinematics()
    check_env_and_sim()
    check_pipeline()
    print("hingerl smoke test passed")
