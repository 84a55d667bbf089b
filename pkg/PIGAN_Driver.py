import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

import AdversarialTrainer
import Checkpoint
from DataReader import DataReader
from DataWriter import DataWriter
from Discriminator import Discriminator
from ExperimentConfig import ConfigError, load_config
from Generator import Generator
from Metrics import FamilyClassifier, evaluate_pairs, motion_profile
from MotionSimulator import (FAMILIES, InstabilityError, make_dataset,
                             resample_dataset)
from NNCore import ShapeMismatchError, TrainingAbortedError
from PhysicsModel import PhysicsParams, reference_pairs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_DATA = 4
COMMANDS = ("simulate", "train", "evaluate", "sweep")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="PIGAN_Driver",
        description="Physics-informed adversarial estimation of muscle "
                    "forces and joint angles from sEMG.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True,
                        help="JSON experiment config")
    parser.add_argument("--data", help="dataset directory")
    parser.add_argument("--out", help="output root (config out_dir)")
    parser.add_argument("--run-id", help="run id (config run_id)")
    parser.add_argument("--seed", type=int,
                        help="overrides every seed of the config")
    parser.add_argument("--resume", action="store_true",
                        help="continue training from the run's checkpoint")
    parser.add_argument("--overwrite", action="store_true",
                        help="replace an existing run directory")
    parser.add_argument("--print-effective-config", action="store_true",
                        help="print the config with defaults and exit")
    return parser


def staging_dir(run_dir, overwrite):
    """Refuses an existing run directory unless overwrite is set and
    returns a fresh temporary directory to write into."""
    if os.path.exists(run_dir) and not overwrite:
        raise FileExistsError("%s exists; pass --overwrite to replace it"
                              % run_dir)
    tmp_dir = run_dir + ".tmp"
    if os.path.exists(tmp_dir):
        shutil.rmtree(tmp_dir)
    os.makedirs(tmp_dir)
    return tmp_dir


def commit_dir(tmp_dir, run_dir):
    """Moves a finished temporary directory into place; an existing
    run_dir is only removed once the new one has been renamed in."""
    old_dir = None
    if os.path.exists(run_dir):
        old_dir = run_dir + ".old"
        if os.path.exists(old_dir):
            shutil.rmtree(old_dir)
        os.replace(run_dir, old_dir)
    os.replace(tmp_dir, run_dir)
    if old_dir is not None:
        shutil.rmtree(old_dir)


def require_data(args):
    if not args.data:
        raise ConfigError("--data is required for %s" % args.command,
                          "data")
    return DataReader(args.data).dataset


def cmd_simulate(cfg, args, run_dir):
    """Simulates the configured dataset and writes it to run_dir.

    Returns
    -------
    manifest:   dict
    """
    dataset = make_dataset(cfg.n_cycles, cfg.simulation, cfg.family,
                           cfg.dataset_seed)
    tmp_dir = staging_dir(run_dir, args.overwrite)
    manifest = DataWriter(tmp_dir).write_dataset(dataset)
    commit_dir(tmp_dir, run_dir)
    counts = {tag: len(dataset.indices(tag))
              for tag in ("train", "test", "eval")}
    print("Simulated %d cycles into %s (train %d, test %d, eval %d)"
          % (len(dataset), run_dir, counts["train"], counts["test"],
             counts["eval"]))
    return manifest


def cmd_train(cfg, args, run_dir):
    """Runs adversarial training, writing checkpoints and the report into
    run_dir.

    A fresh run is written into <run_id>.tmp and moved over run_dir once
    its first checkpoint exists, so a run that fails during pretraining
    leaves any existing run_dir untouched.

    Returns
    -------
    report: TrainReport
    """
    dataset = require_data(args)
    if args.resume:
        if not os.path.isdir(run_dir):
            raise FileNotFoundError(run_dir)
        out_dir, commit = run_dir, None
    else:
        if os.path.exists(run_dir) and not args.overwrite:
            raise FileExistsError("%s exists; pass --overwrite or --resume"
                                  % run_dir)
        out_dir = staging_dir(run_dir, True)

        def commit(trainer):
            commit_dir(out_dir, run_dir)
            trainer.relocate(run_dir)
    DataWriter(out_dir).write_json("config.json", cfg.to_dict())
    trainer = AdversarialTrainer.Trainer(dataset, cfg.training, out_dir)
    _, _, report = trainer.run(resume=args.resume, on_first_checkpoint=commit)
    print("Training finished after %d epochs (%s); report in %s"
          % (trainer.epoch, report.stopped, run_dir))
    return report


def load_models(cfg, dataset, run_dir):
    """Rebuilds generator, feature network and classifier from a run's
    checkpoint, checking every shape against the dataset."""
    tensors = Checkpoint.load_checkpoint(
        os.path.join(run_dir, AdversarialTrainer.CHECKPOINT_FILE))
    training = cfg.training
    generator = Generator(dataset.n_emg, dataset.n_muscles,
                          training.conv_filters, training.hidden_size,
                          training.log_scale_init)
    generator.load_state_dict(tensors, "generator.")
    feature_net = Discriminator(dataset.n_muscles, training.bank_widths,
                                training.bank_kernels)
    feature_net.load_state_dict(tensors, "feature.")
    classifier = None
    if Checkpoint.select(tensors, "classifier."):
        classifier = FamilyClassifier(feature_net.feature_width,
                                      len(FAMILIES))
        classifier.load_state_dict(tensors, "classifier.")
    return generator, feature_net, classifier


def cmd_evaluate(cfg, args, run_dir):
    """Scores a trained run on one split and writes report_<split>.json.

    Returns
    -------
    report: dict
    """
    dataset = require_data(args)
    if cfg.eval_frames is not None:
        dataset = resample_dataset(dataset, cfg.eval_frames)
    split = cfg.eval_split
    samples = dataset.split(split)
    if not samples:
        raise ValueError("dataset has no %s split" % split)
    filename = "report_%s.json" % split
    if os.path.exists(os.path.join(run_dir, filename)) and \
            not args.overwrite:
        raise FileExistsError("%s already has %s; pass --overwrite"
                              % (run_dir, filename))
    generator, feature_net, classifier = load_models(cfg, dataset, run_dir)

    params = PhysicsParams.from_config(dataset.config)
    refs = reference_pairs(samples, params, cfg.training.force_reference)
    preds = [generator.mean_output(s.emg) for s in samples]
    names = (["force_%s" % name for name in dataset.config.channel_names()]
             + ["theta"])
    report = evaluate_pairs(preds, refs, names=names)

    rng = np.random.default_rng(cfg.training.seed)
    outputs, _ = generator.generate_batch(np.stack([s.emg for s in samples]),
                                          rng)
    sampled = [(o.forces, o.theta) for o in outputs]
    if len(samples) >= 2:
        diversity = evaluate_pairs(sampled, refs, feature_net, classifier,
                                   names)
        report["fid"] = diversity["fid"]
        report["inception_score"] = diversity.get("inception_score")
    pred_mean, pred_std = motion_profile([theta for _, theta in preds])
    ref_mean, ref_std = motion_profile([theta for _, theta in refs])
    report["theta_profile"] = {"predicted_mean": pred_mean,
                               "predicted_std": pred_std,
                               "reference_mean": ref_mean,
                               "reference_std": ref_std}
    report.update({"run_id": cfg.run_id, "split": split,
                   "n_cycles": len(samples), "frames": dataset.frames,
                   "embedding": "frozen pretrained discriminator features; "
                                "IS posteriors from a family classifier",
                   "dataset_hash": dataset.content_hash()})
    DataWriter(run_dir).write_json(filename, report)
    print("Evaluated %d %s cycles: theta R2 %s, FID %s"
          % (len(samples), split, report["channels"]["theta"]["r2"],
             report.get("fid")))
    return report


def cmd_sweep(cfg, args, run_dir):
    """Runs the low-shot sweep and the paired collapse comparison.

    Returns
    -------
    lowshot:    dict
    collapse:   dict
    """
    dataset = require_data(args)
    tmp_dir = staging_dir(run_dir, args.overwrite)
    writer = DataWriter(tmp_dir)
    writer.write_json("config.json", cfg.to_dict())
    lowshot = AdversarialTrainer.lowshot_sweep(dataset, cfg.training,
                                               cfg.shot_counts,
                                               cfg.sweep_channel)
    writer.write_json("lowshot.json", lowshot)
    collapse = AdversarialTrainer.collapse_comparison(dataset, cfg.training,
                                                      cfg.collapse_seeds)
    trajectory = collapse.pop("trajectory")
    writer.write_json("collapse.json", collapse)
    for row in trajectory:
        writer.append_jsonl("collapse_trajectory.jsonl", row)
    commit_dir(tmp_dir, run_dir)
    print("Sweep written to %s: R2 trend %s, physics wins %d/%d"
          % (run_dir, lowshot["r2_trend_spearman"],
             collapse["physics_wins"], len(collapse["rows"])))
    return lowshot, collapse


def run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.run_id is not None:
        cfg.run_id = args.run_id
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    if args.print_effective_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return
    run_dir = os.path.join(cfg.out_dir, cfg.run_id)
    commands = {"simulate": cmd_simulate, "train": cmd_train,
                "evaluate": cmd_evaluate, "sweep": cmd_sweep}
    commands[args.command](cfg, args, run_dir)


def main(argv=None):
    logging.basicConfig(filename="PIGAN_logs.txt",
                        format='%(asctime)s %(levelname)s:%(message)s',
                        datefmt='%m/%d/%Y %I:%M:%S %p')

    args = build_parser().parse_args(argv)
    try:
        run(args)
    except (ConfigError, FileExistsError, InstabilityError) as err:
        print("Config error: %s" % err)
        logging.error("Config error: %s" % err)
        return EXIT_CONFIG
    except TrainingAbortedError as err:
        print("Training aborted: %s" % err)
        logging.error("Training aborted: %s; diagnostics %s"
                      % (err, err.diagnostics))
        return EXIT_ABORT
    except (ShapeMismatchError, Checkpoint.ChecksumError, FileNotFoundError,
            TypeError, ValueError) as err:
        print("Data error: %s" % err)
        logging.error("Data error: %s" % err)
        return EXIT_DATA

    logging.info("Successful termination of PIGAN_Driver %s" % args.command)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
