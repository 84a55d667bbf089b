import json
import os
from dataclasses import replace

import numpy as np
import pytest

from AdversarialTrainer import (CHECKPOINT_FILE, REPORT_FILE, STATE_FILE,
                                RewardBaseline, TrainConfig, Trainer,
                                TrainReport, action_value, action_values,
                                adversarial_train, collapse_comparison,
                                expected_reward, lowshot_sweep,
                                policy_gradient_step, structural_rewards)
from Discriminator import Discriminator
from Generator import GenOutput, Generator
from MotionSimulator import SimConfig, make_dataset, make_excitations, \
    simulate_cycle
from NNCore import TrainingAbortedError
from PhysicsModel import (PhysicsParams, lagrangian_residual,
                          structural_reward)


def zero_head(discriminator):
    discriminator.params.tensors["head_W"][...] = 0.0
    discriminator.params.tensors["head_b"][...] = 0.0
    return discriminator


def emg_batch_of(dataset, n=2):
    return np.stack([s.emg for s in dataset.split("train")[:n]])


def without_clock(records):
    return [{k: v for k, v in r.items() if k != "wall_clock"}
            for r in records]


@pytest.mark.parametrize("overrides", [
    dict(learning_rate=0.0),
    dict(rollouts=0),
    dict(reward_mode="hinge"),
    dict(reward_temperature=-1.0),
    dict(force_reference="measured"),
    dict(bank_widths=(2,), bank_kernels=(3, 3)),
])
def test_train_config_rejects(overrides):
    """Tests that invalid training configs raise ValueError.

    Returns
    -------
    None
    """
    with pytest.raises(ValueError):
        TrainConfig(**overrides).validate()


def test_train_config_dict_round_trip(tiny_train_cfg):
    """Tests that from_dict restores a config from its JSON form.

    Returns
    -------
    None
    """
    values = json.loads(json.dumps(tiny_train_cfg.to_dict()))
    assert TrainConfig.from_dict(values) == tiny_train_cfg


def test_reward_baseline_window():
    """Tests that the baseline averages only the last `window` rewards.

    Returns
    -------
    None
    """
    baseline = RewardBaseline(window=2)
    assert baseline.value() == 0.0
    for reward in (1.0, 2.0, 4.0):
        baseline.update(reward)
    assert baseline.value() == 3.0


def test_structural_rewards_modes(knee_params):
    """Tests that mode none rewards every pair with 1 and physics mode
    matches structural_reward.

    Returns
    -------
    None
    """
    forces = np.zeros((2, 10))
    forces[0] = 20.0
    pairs = [(forces, np.zeros(10)), (np.zeros((2, 10)), np.zeros(10))]
    assert np.array_equal(structural_rewards(pairs, knee_params, 0.01,
                                             "none"), [1.0, 1.0])
    rewards = structural_rewards(pairs, knee_params, 0.01, "physics")
    assert rewards[0] == pytest.approx(
        structural_reward(np.zeros(10), forces, knee_params, 0.01))
    assert rewards[1] == 1.0


@pytest.mark.parametrize("mode", ["paper_literal", "positive_square"])
def test_literal_rewards_are_positive_squares(knee_params, mode):
    """Tests that the literal mode rewards exp(+PL^2), under both names.

    Returns
    -------
    None
    """
    theta = np.linspace(0.0, 0.05, 10)
    pairs = [(np.zeros((2, 10)), theta)]
    residual = lagrangian_residual(theta, np.zeros((2, 10)), knee_params,
                                   0.01)
    rewards = structural_rewards(pairs, knee_params, 0.01, mode)
    assert rewards[0] == pytest.approx(np.exp(residual ** 2))
    TrainConfig(reward_mode=mode).validate()


def test_saturated_literal_step_still_updates(generator, discriminator,
                                              small_dataset, knee_params,
                                              tiny_train_cfg, caplog):
    """Tests that literal rewards at the exp(700) cap are reported and
    still give a finite, non-zero generator update.

    Returns
    -------
    None
    """
    heavy = replace(knee_params, inertia=1e4, gravity_torque=1e4)
    cfg = replace(tiny_train_cfg, reward_mode="paper_literal")
    before = generator.state_dict()
    with caplog.at_level("WARNING"):
        _, diagnostics = policy_gradient_step(
            generator, emg_batch_of(small_dataset, 1), discriminator, cfg,
            heavy, small_dataset.dt, rng=np.random.default_rng(5))
    after = generator.state_dict()
    assert "saturated" in caplog.text
    assert diagnostics["mean_structural_reward"] == pytest.approx(
        np.exp(700.0))
    assert np.isfinite(diagnostics["grad_norm"])
    assert diagnostics["grad_norm"] > cfg.clip_norm
    moved = after["generator.head_W"] - before["generator.head_W"]
    assert np.all(np.isfinite(moved)) and np.any(moved != 0.0)


def test_action_value_of_uninformed_discriminator(generator, discriminator,
                                                  small_dataset):
    """Tests that a zero-head discriminator values every frame at 0.5.

    Returns
    -------
    None
    """
    zero_head(discriminator)
    emg = small_dataset.samples[0].emg
    prefix = generator.generate(emg, noise_seed=0)
    for t in (0, 5, 23):
        assert action_value(emg, prefix, t, generator, discriminator, 4,
                            seed=1) == 0.5
    q = action_values(emg, prefix, generator, discriminator, 3,
                      np.random.default_rng(0))
    assert np.array_equal(q, np.full(24, 0.5))


def test_action_value_converges(generator, discriminator, small_dataset):
    """Tests that a 64-rollout action value lies within three standard
    errors of a 10,000-rollout estimate.

    Returns
    -------
    None
    """
    emg = small_dataset.samples[0].emg
    prefix = generator.generate(emg, noise_seed=0)
    estimate = action_value(emg, prefix, 10, generator, discriminator, 64,
                            seed=1)
    completions = generator.mc_rollout(emg, prefix, 10, 10000, seed=2)
    scores = discriminator.discriminate_batch(discriminator.embed(
        np.stack([c.forces for c in completions]),
        np.stack([c.theta for c in completions])))
    standard_error = np.std(scores, ddof=1) / np.sqrt(64)
    assert abs(estimate - np.mean(scores)) <= 3 * standard_error


def test_action_value_at_last_frame(generator, discriminator, small_dataset):
    """Tests that the last frame's action value is the discriminator's
    score of the full sequence.

    Returns
    -------
    None
    """
    emg = small_dataset.samples[1].emg
    prefix = generator.generate(emg, noise_seed=4)
    full = discriminator.discriminate(discriminator.embed(prefix.forces,
                                                          prefix.theta))
    assert action_value(emg, prefix, 23, generator, discriminator, 8) == full
    q = action_values(emg, prefix, generator, discriminator, 2,
                      np.random.default_rng(0))
    assert q[-1] == full
    assert np.all((q > 0) & (q < 1))
    with pytest.raises(ValueError):
        action_value(emg, prefix, 24, generator, discriminator, 2)


def test_expected_reward_of_exact_physics(discriminator):
    """Tests that simulator cycles scored by a zero-head discriminator give
    J = 0.5 times a structural reward of about 1.

    Returns
    -------
    None
    """
    cfg = SimConfig.knee()
    params = PhysicsParams.from_config(cfg)
    batch = []
    for seed in range(3):
        s = simulate_cycle(make_excitations("sine", cfg,
                                            np.random.default_rng(seed)),
                           cfg)
        batch.append((s.emg, GenOutput(s.force, s.theta, None, None, None)))
    zero_head(discriminator)
    assert expected_reward(batch, discriminator, params, cfg.dt,
                           "none") == 0.5
    assert expected_reward(batch, discriminator, params, cfg.dt) == \
        pytest.approx(0.5, abs=1e-3)


def test_expected_reward_matches_loops(generator, discriminator,
                                       small_dataset, knee_params):
    """Tests expected_reward on generated sequences against a direct
    per-sequence summation.

    Returns
    -------
    None
    """
    batch = [(s.emg, generator.generate(s.emg, noise_seed=i))
             for i, s in enumerate(small_dataset.samples[:4])]
    dt = small_dataset.dt
    temperature = np.mean([lagrangian_residual(o.theta, o.forces,
                                               knee_params, dt)
                           for _, o in batch])
    total = 0.0
    for _, output in batch:
        reward = structural_reward(output.theta, output.forces, knee_params,
                                   dt, temperature=temperature)
        total += reward * discriminator.discriminate(
            discriminator.embed(output.forces, output.theta))
    assert expected_reward(batch, discriminator, knee_params, dt,
                           "physics", temperature) == \
        pytest.approx(total / 4, abs=1e-12)
    assert total > 0
    with pytest.raises(ValueError):
        expected_reward([], discriminator, knee_params, dt)


def test_zero_learning_rate_keeps_generator(generator, discriminator,
                                            small_dataset, knee_params,
                                            tiny_train_cfg):
    """Tests that a policy-gradient step with rate 0 leaves the generator
    unchanged.

    Returns
    -------
    None
    """
    cfg = replace(tiny_train_cfg, learning_rate=0.0)
    before = generator.state_dict()
    policy_gradient_step(generator, emg_batch_of(small_dataset),
                         discriminator, cfg, knee_params, small_dataset.dt)
    after = generator.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_zero_advantage_gives_zero_update(generator, discriminator,
                                          small_dataset, knee_params,
                                          tiny_train_cfg):
    """Tests that a baseline equal to every frame reward leaves the
    generator unchanged.

    Returns
    -------
    None
    """
    cfg = replace(tiny_train_cfg, reward_mode="none", learning_rate=1.0)
    zero_head(discriminator)
    baseline = RewardBaseline(history=[0.5])
    before = generator.state_dict()
    _, diagnostics = policy_gradient_step(
        generator, emg_batch_of(small_dataset), discriminator, cfg,
        knee_params, small_dataset.dt, baseline=baseline)
    after = generator.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert diagnostics["grad_norm"] == 0.0
    assert diagnostics["expected_reward"] == 0.5


def test_vanilla_step_diagnostics(generator, discriminator, small_dataset,
                                  knee_params, tiny_train_cfg):
    """Tests that without the physics reward J equals the mean action
    value and the structural reward is 1.

    Returns
    -------
    None
    """
    cfg = replace(tiny_train_cfg, reward_mode="none")
    _, diagnostics = policy_gradient_step(
        generator, emg_batch_of(small_dataset), discriminator, cfg,
        knee_params, small_dataset.dt, rng=np.random.default_rng(5))
    assert diagnostics["mean_structural_reward"] == 1.0
    assert diagnostics["expected_reward"] == diagnostics["mean_action_value"]
    assert np.isfinite(diagnostics["surrogate"])


def test_policy_step_moves_generator(generator, discriminator, small_dataset,
                                     knee_params, tiny_train_cfg):
    """Tests that a regular step changes the generator but not its rollout
    snapshot.

    Returns
    -------
    None
    """
    cfg = replace(tiny_train_cfg, reward_mode="none")
    rollout = generator.copy()
    before = generator.state_dict()
    policy_gradient_step(generator, emg_batch_of(small_dataset, 3),
                         discriminator, cfg, knee_params,
                         small_dataset.dt, rollout_generator=rollout)
    after = generator.state_dict()
    assert not np.array_equal(before["generator.head_W"],
                              after["generator.head_W"])
    assert np.array_equal(rollout.params["head_W"],
                          before["generator.head_W"])


def theta_sum_discriminator(frames, weight):
    """One-muscle discriminator whose real-class logit margin is
    weight * sum(theta) over a cycle of exactly `frames` frames."""
    disc = Discriminator(1, bank_widths=(frames,), bank_kernels=(1,))
    p = disc.params.tensors
    p["bank%d_W" % frames][...] = 0.0
    p["bank%d_W" % frames][0, 1] = 1.0
    p["bank%d_b" % frames][...] = 10.0
    p["hw_WH"][...] = 0.0
    p["hw_bH"][...] = 0.0
    p["hw_WT"][...] = 0.0
    p["hw_bT"][...] = -50.0
    p["head_W"][...] = np.array([[0.0], [weight]])
    p["head_b"][...] = np.array([0.0, -10.0 * weight])
    return disc


def test_policy_step_ascends_expected_reward(knee_params, tiny_train_cfg):
    """Tests that one step of a generator whose only free parameter is
    the angle bias raises J, re-estimated on 10^4 common samples, in at
    least 95 of 100 seeded trials.

    Returns
    -------
    None
    """
    frames = 8
    discriminator = theta_sum_discriminator(frames, 0.5)
    cfg = replace(tiny_train_cfg, reward_mode="none", rollouts=4,
                  learning_rate=0.1)
    emg_batch = np.random.default_rng(0).uniform(size=(16, 2, frames))
    noise = np.random.default_rng(1).standard_normal((10000, 2, frames))

    def expected(generator):
        forces, theta = generator.decode(
            generator.latent_mean(emg_batch[0]) +
            noise * generator.scale()[:, None])
        return np.mean(discriminator.discriminate_batch(
            discriminator.embed(forces, theta)))

    increased = 0
    for trial in range(100):
        generator = Generator(2, 1, conv_filters=2, hidden_size=2, seed=0)
        generator.params.tensors["head_W"][...] = 0.0
        generator.params.frozen.update(
            name for name in generator.params.names() if name != "head_b")
        before = expected(generator)
        policy_gradient_step(generator, emg_batch, discriminator, cfg,
                             knee_params, 0.01,
                             baseline=RewardBaseline(history=[0.5]),
                             rng=np.random.default_rng(trial))
        increased += expected(generator) > before
    assert increased >= 95


def test_train_report_checks_records():
    """Tests that records must advance in epoch and stay finite.

    Returns
    -------
    None
    """
    report = TrainReport(config={}, seeds={})
    report.add({"epoch": 1, "d_loss": 0.5})
    with pytest.raises(ValueError):
        report.add({"epoch": 1, "d_loss": 0.4})
    with pytest.raises(TrainingAbortedError):
        report.add({"epoch": 2, "d_loss": float("nan")})
    report.add({"epoch": 3, "d_loss": 0.3, "fid": None})
    assert report.series("d_loss") == ([1, 3], [0.5, 0.3])
    assert report.final("fid") is None


def test_pretrain_only(small_dataset, tiny_train_cfg, tmp_path):
    """Tests that epochs = 0 returns the pretrained networks and writes
    the checkpoint, state and report.

    Returns
    -------
    None
    """
    cfg = replace(tiny_train_cfg, epochs=0)
    out_dir = str(tmp_path / "run")
    generator, discriminator, report = adversarial_train(small_dataset, cfg,
                                                         out_dir)
    assert report.records == []
    assert len(report.pretrain["mle_losses"]) == cfg.mle_epochs
    assert len(report.pretrain["d_losses"]) == cfg.d_pretrain_epochs
    assert report.pretrain["reward_temperature"] > 0
    for name in (CHECKPOINT_FILE, STATE_FILE, REPORT_FILE):
        assert os.path.isfile(os.path.join(out_dir, name))
    assert np.all(generator.params["force_scale"] > 0)


def test_vanilla_run_is_tagged(small_dataset, tiny_train_cfg):
    """Tests the ablation tag of a run without the physics reward.

    Returns
    -------
    None
    """
    trainer = Trainer(small_dataset, replace(tiny_train_cfg,
                                             reward_mode="none"))
    assert trainer.report.tags["ablation"] == "vanilla_gan"
    assert trainer.report.tags["dataset_hash"] == \
        small_dataset.content_hash()
    assert Trainer(small_dataset, tiny_train_cfg).report.tags[
        "ablation"] is None


def test_training_is_deterministic(small_dataset, tiny_train_cfg):
    """Tests that two runs with the same seeds log identical metrics.

    Returns
    -------
    None
    """
    _, _, a = adversarial_train(small_dataset, tiny_train_cfg)
    _, _, b = adversarial_train(small_dataset, tiny_train_cfg)
    assert len(a.records) == tiny_train_cfg.epochs
    assert without_clock(a.records) == without_clock(b.records)
    record = a.records[-1]
    for key in ("expected_reward", "mean_structural_reward",
                "mean_action_value", "d_loss", "val_rmse_theta"):
        assert np.isfinite(record[key])


def test_resume_matches_uninterrupted_run(small_dataset, tiny_train_cfg,
                                          tmp_path):
    """Tests that stopping after one epoch and resuming reproduces the
    uninterrupted two-epoch run.

    Returns
    -------
    None
    """
    _, _, full = adversarial_train(small_dataset, tiny_train_cfg,
                                   str(tmp_path / "full"))
    out_dir = str(tmp_path / "split")
    adversarial_train(small_dataset, replace(tiny_train_cfg, epochs=1),
                      out_dir)
    trainer = Trainer(small_dataset, tiny_train_cfg, out_dir)
    _, _, resumed = trainer.run(resume=True)
    assert trainer.epoch == 2
    assert [r["epoch"] for r in resumed.records] == [1, 2]
    for a, b in zip(without_clock(full.records),
                    without_clock(resumed.records)):
        assert a.keys() == b.keys()
        for key, value in a.items():
            if value is None:
                assert b[key] is None
            else:
                assert b[key] == pytest.approx(value, abs=1e-10)
    with open(os.path.join(out_dir, "train_log.jsonl")) as infile:
        assert len(infile.readlines()) == 2


def test_lowshot_full_data_row(small_dataset, tiny_train_cfg):
    """Tests that the full-train shot count scores 100% of the baseline.

    Returns
    -------
    None
    """
    cfg = replace(tiny_train_cfg, epochs=1)
    table = lowshot_sweep(small_dataset, cfg, [8])
    row, = table["rows"]
    assert row["shots"] == 8
    assert row["ratio_r2"] == pytest.approx(100.0)
    assert row["ratio_rmse"] == pytest.approx(100.0)
    assert table["dataset_hash"] == small_dataset.content_hash()


def test_lowshot_rows(small_dataset, tiny_train_cfg):
    """Tests one row per distinct shot count in increasing order.

    Returns
    -------
    None
    """
    cfg = replace(tiny_train_cfg, epochs=1)
    table = lowshot_sweep(small_dataset, cfg, [8, 2, 2])
    assert [row["shots"] for row in table["rows"]] == [2, 8]
    assert table["n_train"] == 8


@pytest.mark.parametrize("shots", [[0], [9], []])
def test_lowshot_rejects_shot_counts(small_dataset, tiny_train_cfg, shots):
    """Tests that shot counts outside 1..n_train raise ValueError.

    Returns
    -------
    None
    """
    with pytest.raises(ValueError):
        lowshot_sweep(small_dataset, tiny_train_cfg, shots)


def test_collapse_comparison_is_paired(knee_cfg, tiny_train_cfg):
    """Tests that physics and vanilla runs share the dataset and log a FID
    trajectory and a per-seed delta with its percentage.

    Returns
    -------
    None
    """
    dataset = make_dataset(20, knee_cfg, "mixed", seed=5)
    comparison = collapse_comparison(dataset, tiny_train_cfg, seeds=(0,))
    row, = comparison["rows"]
    assert row["physics_dataset_hash"] == row["vanilla_dataset_hash"] == \
        dataset.content_hash()
    assert row["fid_delta"] == pytest.approx(row["vanilla_final_fid"] -
                                             row["physics_final_fid"])
    if row["vanilla_final_fid"] > 0:
        assert row["fid_improvement"] == pytest.approx(
            100.0 * row["fid_delta"] / row["vanilla_final_fid"])
    assert len(comparison["trajectory"]) == 2 * tiny_train_cfg.epochs
    assert {t["mode"] for t in comparison["trajectory"]} == {"physics",
                                                             "vanilla"}
    assert all(t["fid"] >= 0 for t in comparison["trajectory"])
    assert comparison["physics_wins"] in (0, 1)
