"""
gradcheck: central-difference check of every parameter group on one synthetic batch
"""

from typing import Dict, Tuple

import click

from unimse import numcore as nc
from unimse.commands.common import banner, command_errors, config_options, load_run_config
from unimse.config import derive_seeds, effective_model_config
from unimse.datapipe import batch_iter, complete_manifest, corpus_texts, formalize_manifest, synthesize_dataset
from unimse.errors import ConfigError
from unimse.models import GradCheckReport, RunConfig, Split, Task
from unimse.objectives import compute_loss
from unimse.textcodec import build_vocab
from unimse.transformer import GROUPS, UniMSE
from unimse.unilabel import get_oracle


def gradcheck_batch(config: RunConfig):
    """One K-sample batch of completed synthetic MSA + ERC records, and its vocabulary"""
    k = config.gradcheck.batch_size
    synth = config.synth.model_copy(update={
        "n_msa": {Split.TRAIN: k},
        "n_erc": {Split.TRAIN: k},
        "d_acoustic": config.model.d_acoustic_in,
        "d_visual": config.model.d_visual_in,
        "min_frames": 2,
        "max_frames": 4,
        "text_max_words": min(config.synth.text_max_words, 4),
        "text_min_words": min(config.synth.text_min_words, 2),
    })
    seeds = derive_seeds(config.seed)
    raw = synthesize_dataset(synth, seeds.synth)
    manifest, _, _ = complete_manifest(raw.select(lambda r: r.task == Task.MSA),
                                       raw.select(lambda r: r.task == Task.ERC),
                                       get_oracle(config.oracle), widen=True)
    vocab = build_vocab(corpus_texts(manifest))
    inputs = formalize_manifest(manifest, vocab)
    batch = next(batch_iter(inputs, k, vocab, seed=seeds.shuffle, shuffle=True, cl_enabled=True))
    return batch.drop_modality(config.drop_modality), vocab


def run_gradcheck(config: RunConfig) -> Tuple[GradCheckReport, Dict[str, float]]:
    """Report plus worst relative error per parameter group"""
    if config.model.d_model > config.gradcheck.max_d_model:
        raise ConfigError(f"gradcheck refuses d_model {config.model.d_model} > {config.gradcheck.max_d_model}",
                          {"d_model": config.model.d_model})
    batch, vocab = gradcheck_batch(config)
    seeds = derive_seeds(config.seed)
    model = UniMSE(effective_model_config(config, len(vocab)), seed=seeds.init)

    def build():
        loss, _, _ = compute_loss(model, batch, config.alpha, config.beta, config.temperature,
                                  config.drop_modality)
        return {"loss": loss}

    graph = nc.Graph(build, seed=seeds.dropout)
    check = config.gradcheck
    report = nc.grad_check(graph, model.params, eps=check.eps, tol=check.tol,
                           max_coords=check.max_coords, seed=config.seed)
    worst = {g: 0.0 for g in GROUPS}
    for name, rel in report.per_param.items():
        group = UniMSE.group_of(name)
        worst[group] = max(worst[group], rel)
    return report, worst


@click.command("gradcheck")
@config_options
def gradcheck(**options):
    """Compare analytic and numeric gradients of the full objective"""
    with command_errors("gradcheck"):
        config = load_run_config(**options)
        output_dir = banner("gradcheck", config)
        report, worst = run_gradcheck(config)
        (output_dir / "gradcheck.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
        for group, rel in worst.items():
            click.echo(f"  {group:<10} max rel error {rel:.3e}")
        if not report.passed:
            click.echo(f"✗ gradcheck failed: {len(report.failures)} of {report.checked} coordinates "
                       f"exceed tol {report.tol:g}", err=True)
            for group in GROUPS:
                for f in [f for f in report.failures if UniMSE.group_of(f.param) == group][:3]:
                    click.echo(f"    {group}: {f.param}[{f.index}] analytic {f.analytic:.6e} "
                               f"numeric {f.numeric:.6e} rel {f.rel_error:.2e}", err=True)
            raise SystemExit(1)
        click.echo(f"✓ gradcheck passed: {report.checked} coordinates, "
                   f"max rel error {report.max_rel_error:.3e} <= {report.tol:g}")
