"""The pipeline commands behind `start.py`: synth, train, learn-kernels, infer, refine and eval.

Every command reads its inputs from the configured paths and writes only
below the configured output folder.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .config import dump_config
from .errors import ArtifactError
from .landmarks import read_landmarks, write_landmarks
from .message_passing import (
    bridge_presence,
    build_chain_graph,
    flagged_channels,
    read_kernel_bundle,
    run_passing,
    write_kernel_bundle,
)
from .metrics import detect_presence, evaluate_cases, plot_refinement_errors, stack_landmarks, write_case_errors, write_report_csv
from .network import NetworkSpec, forward, read_model, write_model
from .sparse_refine import ShapeDictionary, read_dictionary, refine, write_dictionary
from .synth import SpineModel, generate_dataset, load_dataset, standard_corruption, write_dataset
from .training import train, write_training_log
from .volume import normalize_stack, read_volume, write_stack

logger = logging.getLogger(__name__)

STAGES = ("DI2IN", "DI2IN+MP", "DI2IN+MP+Sparsity")


def spine_model(config):
    return SpineModel(
        labels=config.label_list,
        dims=config.dims,
        spacing=config.spacing,
        start=config.spine_start(),
        nominal_spacing=config.nominal_spacing_mm,
        jitter=config.jitter_mm,
        spacing_jitter=config.spacing_jitter,
        curvature_jitter=config.curvature_jitter_mm,
        shift_sigma=config.shift_sigma_mm,
        descending=config.descending,
        seed=config.seed,
    )


def network_spec(config):
    return NetworkSpec(
        labels=config.label_list,
        widths=config.widths,
        levels=config.levels,
        learning_rate=config.learning_rate,
        seed=config.seed,
    )


def _check_labels(landmarks, config, source):
    if tuple(landmarks.labels) != config.label_list:
        raise ArtifactError(f"{source}: labels {landmarks.labels} do not match LABELS {config.label_list}")


def _training_set(config):
    dataset = load_dataset(config.train_manifest_path())
    for _, landmarks in dataset:
        _check_labels(landmarks, config, config.train_manifest_path())
    return dataset


def cmd_synth(config):
    """Training and evaluation sets; evaluation spines continue the training seeds."""
    model = spine_model(config)
    train_set = generate_dataset(model, config.train_cases, config.blob_sigma_mm, config.noise_sigma)
    test_set = generate_dataset(model, config.test_cases, config.blob_sigma_mm, config.noise_sigma, offset=config.train_cases)
    train_manifest = write_dataset(train_set, config.train_manifest_path())
    test_manifest = write_dataset(test_set, config.test_manifest_path())
    return {"train_manifest": train_manifest, "test_manifest": test_manifest}


def subset_model_file(config, size):
    return config.model_file().with_name(f"network_n{size}.hdr")


def _train_and_save(config, dataset, model_path, log_name):
    result = train(
        network_spec(config),
        dataset,
        config.epochs,
        config.sigma_mm,
        target_scale=config.scale(),
        batch_size=config.batch_size,
    )
    model_path.parent.mkdir(parents=True, exist_ok=True)
    write_model(result.params, model_path)
    log_path = model_path.parent / log_name
    write_training_log(result, log_path)
    return result, log_path


def cmd_train(config):
    """The main network on every training case, plus one per TRAIN_SIZES entry on the first n cases."""
    dataset = _training_set(config)
    result, log_path = _train_and_save(config, dataset, config.model_file(), "training_log.csv")
    subsets = {}
    for size in config.train_sizes:
        logger.info("training on the first %d of %d cases", size, len(dataset))
        subsets[size] = _train_and_save(config, dataset[:size], subset_model_file(config, size), f"training_log_n{size}.csv")[1]
    return {"model": config.model_file(), "training_log": log_path, "losses": result.losses, "subset_logs": subsets}


def cmd_learn_kernels(config):
    """Kernel bundle and shape dictionary, both from the training landmarks."""
    landmarks = [lm for _, lm in _training_set(config)]
    graph = build_chain_graph(
        landmarks,
        config.label_list,
        config.spacing,
        alpha=config.alpha,
        iterations=config.iterations,
        smoothing_sigma=config.kernel_smoothing,
        half_width=config.kernel_half_width,
    )
    bundle = config.kernel_file()
    bundle.parent.mkdir(parents=True, exist_ok=True)
    write_kernel_bundle(graph, bundle)
    dictionary = ShapeDictionary.from_landmark_sets(landmarks, config.constant_column)
    directory = write_dictionary(dictionary, config.dictionary_path())
    return {"kernels": bundle, "dictionary": directory, "edges": len(graph.edges())}


def load_graph(config):
    graph = read_kernel_bundle(config.kernel_file())
    if graph.labels != config.label_list:
        raise ArtifactError(f"{config.kernel_file()}: kernel labels do not match LABELS")
    return replace(graph, alpha=config.alpha, iterations=config.iterations)


def load_model(config, path=None):
    path = path or config.model_file()
    params = read_model(path)
    if params.spec.labels != config.label_list:
        raise ArtifactError(f"{path}: network labels do not match LABELS")
    return params


def network_stack(params, volume):
    """Final network output with negative responses clipped to zero."""
    _, final = forward(params, volume)
    return final.with_data(np.maximum(final.data, 0.0))


def pass_messages(stack, present, graph):
    """Message passing on the detected channels; returns the passed stack and its presence flags."""
    keep = np.array([label in present for label in stack.labels])
    maps = normalize_stack(stack.with_data(stack.data * keep[:, None, None, None]))
    passed = run_passing(maps, graph)
    flags = bridge_presence(keep)
    empty = set(flagged_channels(passed))
    present_after = tuple(label for label, f in zip(stack.labels, flags) if f and label not in empty)
    return passed, present_after


def refine_landmarks(config, landmarks, dictionary):
    return refine(landmarks, dictionary, lam=config.lam, lambda_ratio=config.lambda_ratio, descending=config.descending)


@dataclass
class InferenceResult:
    net: object
    net_landmarks: object
    passed: object = None
    passed_landmarks: object = None
    paths: dict = field(default_factory=dict)


def cmd_infer(config, volume_path, out_dir=None):
    params = load_model(config)
    volume = read_volume(volume_path)
    net = network_stack(params, volume)
    present = detect_presence(net, config.threshold())
    result = InferenceResult(net, stack_landmarks(net, present))
    out_dir = Path(out_dir) if out_dir else config.out / "infer" / Path(volume_path).stem
    result.paths["net"] = write_stack(net, out_dir / "net")
    result.paths["net_landmarks"] = out_dir / "net_landmarks.csv"
    write_landmarks(result.net_landmarks, result.paths["net_landmarks"])
    if config.kernel_file().is_file():
        result.passed, present_after = pass_messages(net, present, load_graph(config))
        result.passed_landmarks = stack_landmarks(result.passed, present_after)
        result.paths["passed"] = write_stack(result.passed, out_dir / "passed")
        result.paths["passed_landmarks"] = out_dir / "passed_landmarks.csv"
        write_landmarks(result.passed_landmarks, result.paths["passed_landmarks"])
    else:
        logger.warning("no kernel bundle at %s; message passing skipped", config.kernel_file())
    return result


def cmd_refine(config, landmarks_path, out_path=None):
    pred = read_landmarks(landmarks_path)
    _check_labels(pred, config, landmarks_path)
    dictionary = read_dictionary(config.dictionary_path(), config.constant_column)
    result = refine_landmarks(config, pred, dictionary)
    out_path = Path(out_path) if out_path else config.out / "refined" / f"{Path(landmarks_path).stem}_refined.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_landmarks(result.landmarks, out_path)
    return result, out_path


def stage_predictions(config, net, truth, rng, graph, dictionary):
    """Landmarks after each stage for one case, under the standard corruption suite."""
    corrupted, record = standard_corruption(
        net,
        truth,
        rng,
        config.sigma_mm,
        nominal_spacing=config.nominal_spacing_mm,
        weak_amplitude=config.corrupt_weak_amplitude,
        strong_amplitude=config.corrupt_strong_amplitude,
        descending=config.descending,
    )
    present = detect_presence(corrupted, config.threshold())
    net_only = stack_landmarks(corrupted, present)
    passed, present_after = pass_messages(corrupted, present, graph)
    with_mp = stack_landmarks(passed, present_after)
    refined = refine_landmarks(config, with_mp, dictionary)
    return {STAGES[0]: net_only, STAGES[1]: with_mp, STAGES[2]: refined.landmarks}, record


def score_stages(predictions, truths, config, suffix=""):
    """One report per stage; `predictions` maps stage name to per-case landmark sets."""
    return [evaluate_cases(stage + suffix, predictions[stage], truths, config.id_radius_mm) for stage in predictions]


def evaluate_network(config, params, test_set, graph, dictionary, suffix=""):
    """Stage reports for one network over the test set, plus the per-case corruption notes."""
    predictions = {stage: [] for stage in STAGES}
    truths, corruptions = [], []
    for case, (volume, truth) in enumerate(test_set):
        _check_labels(truth, config, config.test_manifest_path())
        rng = np.random.default_rng(config.seed + case)
        stages, record = stage_predictions(config, network_stack(params, volume), truth, rng, graph, dictionary)
        for stage, landmarks in stages.items():
            predictions[stage].append(landmarks)
        truths.append(truth)
        corruptions.append({"case": case, "corruption": record.describe()})
        logger.debug("case %d: %s", case, record.describe())
    return score_stages(predictions, truths, config, suffix), corruptions


@dataclass
class EvalSummary:
    reports: list
    corruptions: list
    paths: dict = field(default_factory=dict)


def cmd_eval(config):
    """Stage reports for the main network, then for each TRAIN_SIZES network; the plot uses the main one."""
    params = load_model(config)
    graph = load_graph(config)
    dictionary = read_dictionary(config.dictionary_path(), config.constant_column)
    test_set = load_dataset(config.test_manifest_path())
    reports, corruptions = evaluate_network(config, params, test_set, graph, dictionary)
    for size in config.train_sizes:
        subset = load_model(config, subset_model_file(config, size))
        reports += evaluate_network(config, subset, test_set, graph, dictionary, f" (n={size})")[0]
    out = config.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    summary = EvalSummary(reports, corruptions)
    summary.paths["report"] = out / "report.csv"
    write_report_csv(reports, summary.paths["report"])
    summary.paths["cases"] = out / "per_case_errors.csv"
    write_case_errors(reports, summary.paths["cases"])
    summary.paths["corruptions"] = out / "corruptions.csv"
    pd.DataFrame(corruptions, columns=["case", "corruption"]).to_csv(summary.paths["corruptions"], index=False)
    summary.paths["plot"] = plot_refinement_errors(reports[1], reports[2], out / "refinement_errors.svg", config.label_list)
    summary.paths["config"] = dump_config(config, out / "effective_config.txt")
    return summary
