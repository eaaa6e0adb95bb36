"""
Analysis suites driven by a RunConfig: linear-probe reports and cross-model
alignment heatmaps over the frozen bundle.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

from ..analysis.alignment import AlignmentHeatmap, alignment_heatmap, export_heatmap
from ..analysis.probe import ProbeReport, layer_target_sweep, save_probe_report
from ..analysis.representations import RepresentationSet
from ..dataflows.captions import caption_prompt
from ..dataflows.world import Dataset, Sample
from ..frozen.bundle import FrozenBundle, LMKind, lm_layer_states, vision_encode
from ..lab_configs import sweep_layer_indices
from ..qformer.qformer import QFormerState, load_qformer, qformer_forward
from ..tensor.core import no_grad
from ..tensor.rng import Rng
from .experiment_runner import ExperimentRunner, single_threaded
from .run_config import ExperimentKind, ProbeCorpus, RunConfig

logger = logging.getLogger(__name__)


def analysis_samples(dataset: Dataset, count: int) -> List[Sample]:
    """Train-split samples first, topped up from val (no held-out scenes)."""
    pool = dataset.split("train") + dataset.split("val")
    return pool[:count]


def _corpus_ids(sample: Sample, corpus: ProbeCorpus) -> List[int]:
    if corpus == ProbeCorpus.QUESTIONS and sample.qa:
        return sample.qa[0].question_ids
    return sample.caption_ids


def qformer_source(runner: ExperimentRunner, qformer: QFormerState, samples: List[Sample], label: str) -> RepresentationSet:
    """Mean over the n_q QFormer output rows, captioning prompt, one row per sample."""
    prompt = runner.prompt_ids(caption_prompt(0))
    with no_grad():
        rows = [qformer_forward(qformer, runner.features(s), prompt).data.mean(axis=0) for s in samples]
    return RepresentationSet.from_rows(rows, label)


def probe_targets(bundle: FrozenBundle, kind: ExperimentKind):
    """(layer indices, labels): input embeddings vs encoder outputs, or the scaled layer sweep."""
    depth = bundle.lm_depth
    if bundle.lm_kind == LMKind.ENCODER_DECODER and kind != ExperimentKind.LAYER_SWEEP:
        return [0, depth], {0: "input embeddings", depth: "encoder outputs"}
    return sweep_layer_indices(depth), {}


def run_probe_suite(
    config: RunConfig,
    bundle: Optional[FrozenBundle] = None,
    dataset: Optional[Dataset] = None,
    qformers: Optional[Dict[str, QFormerState]] = None,
    out_dir: Optional[Path] = None,
) -> Dict[str, ProbeReport]:
    """
    Probe QFormer outputs onto LM representations of the same samples.

    A fresh QFormer is always probed; a trained one is added from `qformers`
    or config.qformer_checkpoint, giving one report file per QFormer.

    Returns:
        dict: QFormer name -> ProbeReport (also written as probe_report[-name].json)
    """
    runner = ExperimentRunner(config, bundle, dataset)
    qformers = dict(qformers or {})
    qformers.setdefault("fresh", runner.new_qformer())
    if config.qformer_checkpoint and "trained" not in qformers:
        qformers["trained"] = load_qformer(config.qformer_checkpoint)

    samples = analysis_samples(runner.dataset, config.analysis_samples)
    indices, labels = probe_targets(runner.bundle, config.kind)
    with single_threaded(runner.single_thread):
        lm_states = [lm_layer_states(runner.bundle, _corpus_ids(s, config.probe_corpus)) for s in samples]
        reports = {}
        for name, qformer in qformers.items():
            source = qformer_source(runner, qformer, samples, f"{name} qformer mean query output")
            report = layer_target_sweep(
                source, lm_states, indices, config.probe_epochs, config.probe_lr, Rng(config.seed).spawn(f"probe:{name}"), labels
            )
            report.provenance = {
                "config_hash": runner.config_hash,
                "qformer": name,
                "corpus": config.probe_corpus.value,
                "lm_kind": runner.bundle.lm_kind.value,
                "bundle_fingerprint": runner.bundle.fingerprint,
                "samples": len(samples),
            }
            reports[name] = report

    root = Path(out_dir) if out_dir else runner.run_dir()
    for name, report in reports.items():
        filename = "probe_report.json" if name == "fresh" else f"probe_report-{name}.json"
        save_probe_report(report, root / filename)
        logger.info("Probe %s: %s", name, ", ".join(f"{e.target_label}={e.final_loss:.4f}" for e in report.entries))
    return reports


def run_alignment(
    config: RunConfig,
    bundle: Optional[FrozenBundle] = None,
    dataset: Optional[Dataset] = None,
    out_dir: Optional[Path] = None,
) -> AlignmentHeatmap:
    """
    Mutual-KNN heatmap of LM layer aggregates (captions) against vision
    layer aggregates (images) of the same samples; writes heatmap.csv/json.
    """
    runner = ExperimentRunner(config, bundle, dataset)
    samples = analysis_samples(runner.dataset, config.analysis_samples)
    with single_threaded(runner.single_thread):
        lm_states = [lm_layer_states(runner.bundle, s.caption_ids) for s in samples]
        vit_states = [vision_encode(runner.bundle, s.image)[1] for s in samples]
        heatmap = alignment_heatmap(lm_states, vit_states, config.knn_k, config.knn_metric)
    export_heatmap(heatmap, Path(out_dir) if out_dir else runner.run_dir())
    logger.info("Heatmap argmax at LM layer %d / vision layer %d", *heatmap.argmax_cell)
    return heatmap
