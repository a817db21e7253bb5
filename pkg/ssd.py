""" Command-line entry point: python ssd.py <command> [--config experiments/har.toml] ...

    Exit codes: 0 success, 1 runtime failure, 2 configuration error. """

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

import baseline_utils as bu
import config_utils as cu
import data_utils as du
import ssd_utils as ssd
import stats_utils as su
import train_utils as tr
from config_utils import OutputExistsError
from tensor_utils import CheckpointError, ConfigError, RngStream, SSDError

logger = logging.getLogger("ssd")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
VARIANCE_SAMPLES = 256


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Shared helpers
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def _overrides(args):
    seed = getattr(args, "seed", None)
    mapping = {
        "output.dir": args.output,
        "data.path": args.data_path,
        "teacher.seed": seed,
        "student.seed": seed,
        "student.epochs": getattr(args, "epochs", None),
        "ssd.selection_scheme": getattr(args, "selection", None),
        "ssd.top_k": getattr(args, "k", None),
        "ssd.n": getattr(args, "n", None),
        "ssd.p_t": getattr(args, "p_t", None),
        "ssd.eps": getattr(args, "eps", None),
        "ssd.lam": getattr(args, "lam", None),
        "ssd.h": getattr(args, "h", None),
        "ssd.workers": getattr(args, "workers", None),
        "compare.members": getattr(args, "members", None),
    }
    if getattr(args, "command", None) == "train-teacher":
        mapping["teacher.epochs"] = getattr(args, "epochs", None)
        mapping["student.epochs"] = None
    return mapping


def resolve_config(args):
    cfg = cu.load_config(args.config) if args.config else cu.ExperimentConfig()
    return cu.apply_overrides(cfg, _overrides(args))


def _arch(cfg, splits):
    return cfg.model.build(splits.train.input_shape, splits.train.class_count).arch


def _teacher(args, cfg, splits, out, progress):
    """ The teacher checkpoint given by --teacher, else the run directory's; trained in place when missing """
    path = Path(getattr(args, "teacher", None) or out / "teacher.ssdt")
    arch = _arch(cfg, splits)
    if path.is_file():
        return tr.load_model(path, arch).freeze()
    if getattr(args, "teacher", None):
        raise CheckpointError(f"teacher checkpoint not found: {path}")
    cu.prepare_output_dir(out, ["teacher.ssdt", "history.csv"], args.force)
    logger.info("no teacher checkpoint at %s, training one", path)
    t = cfg.teacher
    model = cfg.model.build(splits.train.input_shape, splits.train.class_count, seed=t.seed)
    _, history = tr.train_teacher(model, splits, t.optimizer_config(), t.scheduler_config(), t.epochs,
                                  t.early_stop_config(), t.batch_size, t.seed, progress=progress, checkpoint_path=path)
    history.to_csv(out / "history.csv", index=False)
    return model.freeze()


def _train_student(cfg, ssd_cfg, teacher, splits, progress, epochs=None, checkpoint_path=None):
    s = cfg.student
    student = tr.init_student_from_teacher(teacher, ssd_cfg.init_from_teacher, seed=s.seed)
    state, history, diagnostics = tr.train_student(student, teacher, splits, ssd_cfg, s.optimizer_config(),
                                                   s.scheduler_config(), s.epochs if epochs is None else epochs,
                                                   s.early_stop_config(), s.batch_size, s.seed, progress,
                                                   checkpoint_path)
    return student, history, diagnostics


def _write_table(out, stem, df, formats, extra=None):
    if "csv" in formats:
        df.to_csv(out / f"{stem}.csv", index=False)
    if "json" in formats:
        cu.write_json(out / f"{stem}.json", {**(extra or {}), "rows": df.to_dict(orient="records")})


def _split(splits, name):
    if name not in ("train", "val", "test"):
        raise ConfigError(f"split must be train, val or test, got {name!r}")
    return getattr(splits, name)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Commands
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def cmd_train_teacher(args, cfg, progress):
    out = cu.prepare_output_dir(cfg.output.dir, ["teacher.ssdt", "history.csv", "report.json", "manifest.json"],
                                args.force)
    splits = du.load_dataset(cfg.data, progress)
    t = cfg.teacher
    model = cfg.model.build(splits.train.input_shape, splits.train.class_count, seed=t.seed)
    _, history = tr.train_teacher(model, splits, t.optimizer_config(), t.scheduler_config(), t.epochs,
                                  t.early_stop_config(), t.batch_size, t.seed, progress=progress,
                                  checkpoint_path=out / "teacher.ssdt")
    history.to_csv(out / "history.csv", index=False)
    metrics = tr.evaluate(model, splits.test)
    ledger = tr.count_flops("baseline", model, len(splits.train), t.epochs)
    cu.write_json(out / "report.json", {"method": "baseline", "test": metrics, "parameters": model.num_parameters(),
                                        "flops": ledger.as_row()})
    cu.write_manifest(out / "manifest.json", cfg, "train-teacher", model.arch)
    logger.info("teacher test accuracy %.4f, written to %s", metrics["accuracy"], out)
    return metrics


def cmd_train_student(args, cfg, progress):
    outputs = ["student.ssdt", "student_history.csv", "diagnostics.csv", "student_report.json",
               "student_manifest.json"]
    out = cu.prepare_output_dir(cfg.output.dir, outputs, args.force)
    splits = du.load_dataset(cfg.data, progress)
    teacher = _teacher(args, cfg, splits, out, progress)
    student, history, diagnostics = _train_student(cfg, cfg.ssd, teacher, splits, progress,
                                                   checkpoint_path=out / "student.ssdt")
    history.to_csv(out / "student_history.csv", index=False)
    diagnostics.to_csv(out / "diagnostics.csv", index=False)

    teacher_metrics = tr.evaluate(teacher, splits.test)
    student_metrics = tr.evaluate(student, splits.test)
    ledger = tr.count_flops("ssd", student, len(splits.train), cfg.teacher.epochs, n=cfg.ssd.n,
                            student_epochs=cfg.student.epochs)
    report = {"ssd": cfg.ssd.to_dict(), "teacher": teacher_metrics, "student": student_metrics,
              "accuracy_delta": student_metrics["accuracy"] - teacher_metrics["accuracy"],
              "mean_kept": float(diagnostics["mean_kept"].mean()) if len(diagnostics) else None,
              "flops": ledger.as_row()}
    cu.write_json(out / "student_report.json", report)
    cu.write_manifest(out / "student_manifest.json", cfg, "train-student", student.arch,
                      {"teacher_checkpoint": str(getattr(args, "teacher", None) or out / "teacher.ssdt")})
    logger.info("teacher %.4f -> student %.4f (delta %+.4f)", teacher_metrics["accuracy"],
                student_metrics["accuracy"], report["accuracy_delta"])
    return report


def cmd_ablate(args, cfg, progress):
    grid = cfg.ablation.grid()
    out = cu.prepare_output_dir(cfg.output.dir, ["ablation.csv", "ablation.json", "ablation_manifest.json"],
                                args.force)
    splits = du.load_dataset(cfg.data, progress)
    teacher = _teacher(args, cfg, splits, out, progress)
    variance_batch = splits.test.samples[:VARIANCE_SAMPLES]
    variance_ids = np.arange(len(variance_batch))
    rng = RngStream(cfg.student.seed).derive(ssd.TEACHER_STREAM)

    rows = []
    for point in tqdm(grid, desc="ablation", disable=not progress):
        try:
            ssd_cfg = replace(cfg.ssd, **point)
        except ConfigError as err:
            raise ConfigError(f"ablation point {point}: {err}") from err
        student, _, diagnostics = _train_student(cfg, ssd_cfg, teacher, splits, progress, cfg.ablation.epochs)
        metrics = tr.evaluate(student, splits.test)
        variance = float("nan")
        if ssd_cfg.n >= 2:
            teacher_set = ssd.generate_stochastic_representations(teacher, variance_batch, ssd_cfg, rng,
                                                                  variance_ids)
            variance = ssd.representation_variance(teacher_set)
        rows.append({**{k: (v.value if hasattr(v, "value") else v) for k, v in point.items()},
                     "accuracy": metrics["accuracy"], "macro_f1": metrics["macro_f1"],
                     "rep_variance": variance,
                     "mean_kept": float(diagnostics["mean_kept"].mean()) if len(diagnostics) else float("nan")})
        logger.info("ablation %s: accuracy %.4f variance %.4g", point, metrics["accuracy"], variance)

    table = su.sweep_table(rows)
    baseline = tr.evaluate(teacher, splits.test)["accuracy"]
    _write_table(out, "ablation", table, cfg.output.formats, {"baseline_accuracy": baseline,
                                                             "axes": cfg.ablation.axes()})
    cu.write_manifest(out / "ablation_manifest.json", cfg, "ablate", teacher.arch)
    return table


def _members(args, cfg, splits, arch, folder, progress):
    """ Loads member_XX.ssdt checkpoints, training the missing ones when --train-members is set """
    t = cfg.teacher
    paths, models = [], []
    for seed in tqdm(range(cfg.compare.members), desc="members", disable=not progress):
        path = folder / f"member_{seed:02d}.ssdt"
        if path.is_file():
            model = tr.load_model(path, arch)
        elif args.train_members:
            model, _ = tr.train_member(seed, arch, splits, t.optimizer_config(), t.scheduler_config(), t.epochs,
                                       t.batch_size, checkpoint_path=path)
        else:
            raise CheckpointError(f"member checkpoint missing: {path}; pass --train-members to train it")
        paths.append(path)
        models.append(model.freeze())
    return paths, models


def _soup_members(cfg, teacher, splits, folder, progress):
    """ Short fine-tunes of the teacher, one per seed, at a reduced learning rate """
    c, t = cfg.compare, cfg.teacher
    models = []
    for seed in tqdm(range(c.members), desc="soup members", disable=not progress):
        path = folder / f"soup_{seed:02d}.ssdt"
        if path.is_file():
            model = tr.load_model(path, teacher.arch)
        else:
            model = tr.init_student_from_teacher(teacher, seed=seed)
            tr.fine_tune(model, splits, t.optimizer_config().scaled(c.lr_scale), t.scheduler_config(),
                         c.finetune_epochs, cfg.ssd.p_s, None, t.batch_size, seed, checkpoint_path=path)
        models.append(model.freeze())
    return models


def cmd_compare(args, cfg, progress):
    out = cu.prepare_output_dir(cfg.output.dir, ["comparison.csv", "comparison.json", "compare_manifest.json"],
                                args.force)
    splits = du.load_dataset(cfg.data, progress)
    teacher = _teacher(args, cfg, splits, out, progress)
    arch, c, t = teacher.arch, cfg.compare, cfg.teacher
    folder = out / "members"
    folder.mkdir(exist_ok=True)
    n_train = len(splits.train)

    def flops(method):
        return tr.count_flops(method, teacher, n_train, t.epochs, n=cfg.ssd.n, members=c.members,
                              student_epochs=cfg.student.epochs, finetune_epochs=c.finetune_epochs)

    baseline_ledger = flops("baseline")
    rows = []

    def record(method, model, ledger):
        metrics = tr.evaluate(model, splits.test)
        rows.append({"method": method, "accuracy": metrics["accuracy"], "macro_f1": metrics["macro_f1"],
                     "weighted_f1": metrics["weighted_f1"], "inference_params": bu.inference_parameter_count(model),
                     "train_flops": ledger.total, "flop_ratio": ledger.ratio_to(baseline_ledger),
                     "full_training_ratio": ledger.ratio_to(baseline_ledger, full_training=True)})
        logger.info("%s: accuracy %.4f", method, metrics["accuracy"])

    record("baseline", teacher, baseline_ledger)

    member_paths, members = _members(args, cfg, splits, arch, folder, progress)
    bu.save_ensemble_manifest(bu.EnsembleSpec(member_paths, bu.CombinationRule.MAJORITY_VOTE),
                              folder / "ensemble.json")
    for rule, method in ((bu.CombinationRule.MAJORITY_VOTE, "ensemble_vote"),
                         (bu.CombinationRule.PROBABILITY_AVERAGE, "ensemble_average")):
        record(method, bu.Ensemble(members, rule), flops(method))

    soup_members = members if c.soup_from_scratch else _soup_members(cfg, teacher, splits, folder, progress)
    soup_ledger = flops("ensemble") if c.soup_from_scratch else flops("soup")
    record("uniform_soup", bu.uniform_soup(soup_members), soup_ledger)
    record("greedy_soup", bu.greedy_soup(soup_members, splits.val), soup_ledger)

    if c.swa:
        swa_model = cfg.model.build(splits.train.input_shape, splits.train.class_count, seed=t.seed)
        swa = bu.SwaAccumulator(start_epoch=int(t.epochs * c.swa_start_fraction))
        tr.train_teacher(swa_model, splits, t.optimizer_config(), t.scheduler_config(), t.epochs, None,
                         t.batch_size, t.seed, swa=swa, progress=progress)
        record("swa", swa.average(swa_model), flops("swa"))

    student_path = out / "student.ssdt"
    if student_path.is_file():
        student = tr.load_model(student_path, arch)
    else:
        student, _, _ = _train_student(cfg, cfg.ssd, teacher, splits, progress, checkpoint_path=student_path)
    record("ssd", student, flops("ssd"))

    table = su.sweep_table(rows)
    _write_table(out, "comparison", table, cfg.output.formats, {"members": c.members})
    cu.write_manifest(out / "compare_manifest.json", cfg, "compare", arch,
                      {"ensemble_manifest": str(folder / "ensemble.json")})
    return table


def cmd_export_embeddings(args, cfg, progress):
    out = cu.prepare_output_dir(cfg.output.dir, ["embeddings.csv", "export_manifest.json"], args.force)
    splits = du.load_dataset(cfg.data, progress)
    path = Path(args.checkpoint or out / "teacher.ssdt")
    model = tr.load_model(path, _arch(cfg, splits)).freeze()
    dataset = _split(splits, args.split)
    if args.limit is not None:
        dataset = dataset.subset(np.arange(min(args.limit, len(dataset))))
    export_cfg = ssd.SSDConfig(n=cfg.ssd.n, p_t=cfg.ssd.p_t, workers=cfg.ssd.workers)
    rng = RngStream(cfg.student.seed).derive(ssd.TEACHER_STREAM)

    frames = []
    for ids, x, y in du.iterate_batches(dataset, cfg.teacher.batch_size):
        teacher_set = ssd.generate_stochastic_representations(model, x, export_cfg, rng, ids)
        b, n, d = teacher_set.features.shape
        frame = pd.DataFrame(teacher_set.features.reshape(b * n, d), columns=[f"f{j}" for j in range(d)])
        frame.insert(0, "label", np.repeat(y, n))
        frame.insert(0, "pass_index", np.tile(teacher_set.pass_indices, b))
        frame.insert(0, "sample_id", np.repeat(ids, n))
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["sample_id", "pass_index",
                                                                                     "label"])
    table.to_csv(out / "embeddings.csv", index=False)
    cu.write_manifest(out / "export_manifest.json", cfg, "export-embeddings", model.arch,
                      {"checkpoint": str(path), "split": args.split, "limit": args.limit, "n": export_cfg.n,
                       "p_t": export_cfg.p_t})
    logger.info("wrote %d embedding rows to %s", len(table), out / "embeddings.csv")
    return table


def cmd_eval(args, cfg, progress):
    out = cu.prepare_output_dir(cfg.output.dir, ["eval_report.json", "eval_manifest.json"], args.force)
    splits = du.load_dataset(cfg.data, progress)
    arch = _arch(cfg, splits)
    if args.ensemble:
        model = tr.load_ensemble(args.ensemble, arch)
        source = args.ensemble
    else:
        source = Path(args.checkpoint or out / "teacher.ssdt")
        model = tr.load_model(source, arch)
    metrics = tr.evaluate(model, _split(splits, args.split))
    cu.write_json(out / "eval_report.json", {"source": str(source), "split": args.split, **metrics})
    cu.write_manifest(out / "eval_manifest.json", cfg, "eval", arch,
                      {"checkpoint": None if args.ensemble else str(source), "ensemble": args.ensemble,
                       "split": args.split})
    logger.info("%s on %s: accuracy %.4f", source, args.split, metrics["accuracy"])
    return metrics


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Parser
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--output", help="run directory (overrides [output] dir)")
    common.add_argument("--data-path", help=f"dataset root (falls back to ${du.DATA_DIR_ENV})")
    common.add_argument("--seed", type=int, help="seed for teacher and student runs")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")
    return common


def _ssd_flags(parser):
    parser.add_argument("--teacher", help="teacher checkpoint (default: <output>/teacher.ssdt)")
    parser.add_argument("--selection", choices=[s.value for s in ssd.SelectionScheme])
    parser.add_argument("--k", type=int, help="rows kept by the top-k scheme")
    parser.add_argument("--n", type=int, help="stochastic teacher passes")
    parser.add_argument("--p-t", type=float, help="teacher distillation-time dropout")
    parser.add_argument("--eps", type=float, help="percentile threshold in [0, 100]")
    parser.add_argument("--lam", type=float, help="distillation loss weight")
    parser.add_argument("--temperature", dest="h", type=float, help="attention temperature h")
    parser.add_argument("--workers", type=int, help="threads for the teacher passes")
    parser.add_argument("--epochs", type=int, help="student epochs")


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="ssd", description="Stochastic self-distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", parents=[common], help="train the baseline / teacher model")
    p.add_argument("--epochs", type=int, help="teacher epochs")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", parents=[common], help="distill a student from a trained teacher")
    _ssd_flags(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("ablate", parents=[common], help="sweep the [ablation] grid")
    _ssd_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", parents=[common], help="baseline vs ensembles, soups, SWA and SSD")
    _ssd_flags(p)
    p.add_argument("--members", type=int, help="ensemble / soup size")
    p.add_argument("--train-members", action="store_true", help="train member checkpoints that are missing")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-embeddings", parents=[common], help="write stochastic teacher features to CSV")
    p.add_argument("--checkpoint", help="model checkpoint (default: <output>/teacher.ssdt)")
    p.add_argument("--n", type=int, help="passes per sample")
    p.add_argument("--p-t", type=float, help="distillation-time dropout")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, help="export only the first LIMIT samples")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or an ensemble manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--ensemble", help="ensemble manifest JSON")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)
    return parser


def configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args)
    try:
        cfg = resolve_config(args)
        args.func(args, cfg, not args.quiet)
    except (ConfigError, OutputExistsError) as err:
        print(f"ssd: configuration error: {err}", file=sys.stderr)
        return 2
    except (SSDError, OSError) as err:
        print(f"ssd: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
