"""
Ablation Pipeline Script
- Synthesizes one planted-cue corpus per seed and completes its labels.
- Trains the full model and every ablation arm on it.
- Scores test-split task exact-match for each run.
- Checks that the full model beats every modality-drop arm on average.
"""
from pathlib import Path

import pandas as pd

from unimse.commands.train import train_model
from unimse.config import derive_seeds, resolve_config
from unimse.datapipe import complete_manifest, formalize_manifest, synthesize_dataset
from unimse.errors import UniMSEError
from unimse.inference import exact_match, predict, task_exact_match
from unimse.models import Split, Task
from unimse.unilabel import get_oracle

OUTPUT_DIR = Path("runs/ablation")
SEEDS = (0, 1, 2)
EPOCHS = 30
SAMPLES_PER_TASK = {"train": 700, "valid": 150, "test": 150}

ARMS = {
    "full": {},
    "drop_a": {"drop_modality": "a"},
    "drop_v": {"drop_modality": "v"},
    "drop_av": {"drop_modality": "av"},
    "no_pmf": {"no_pmf": True},
    "no_cl": {"no_cl": True},
}
DROP_ARMS = ("drop_a", "drop_v", "drop_av")


def build_corpus(seed):
    """Completed 2,000-sample unified manifest for one seed"""
    config = resolve_config(overrides=[f"synth.n_msa={SAMPLES_PER_TASK}", f"synth.n_erc={SAMPLES_PER_TASK}"],
                            seed=seed)
    raw = synthesize_dataset(config.synth, derive_seeds(seed).synth)
    manifest, _, summary = complete_manifest(
        raw.select(lambda r: r.task == Task.MSA),
        raw.select(lambda r: r.task == Task.ERC),
        get_oracle(config.oracle),
    )
    print(f"✓ Seed {seed}: {summary.total} samples, "
          f"{summary.generated_emotion + summary.generated_intensity} fields completed")
    return manifest


def run_arm(arm, seed, manifest):
    """Train one arm and score it on the test split"""
    config = resolve_config(seed=seed, epochs=EPOCHS, output_dir=str(OUTPUT_DIR / arm / f"seed{seed}"),
                            **ARMS[arm])
    result = train_model(config, manifest, echo=lambda line: None)
    test = manifest.select(lambda r: r.split == Split.TEST)
    predictions = predict(result.model, formalize_manifest(test, result.vocab), result.vocab,
                          config.batch_size, config.n_jobs, config.drop_modality)
    last = result.losses.iloc[-1]
    return {
        "arm": arm,
        "seed": seed,
        "task_exact_match": task_exact_match(predictions),
        "exact_match": exact_match(predictions),
        "final_task_loss": last["task"],
        "final_total_loss": last["total"],
    }


def main():
    print("\n--- Starting Ablation Pipeline ---")
    rows = []
    for seed in SEEDS:
        manifest = build_corpus(seed)
        for arm in ARMS:
            try:
                row = run_arm(arm, seed, manifest)
            except UniMSEError as e:
                print(f"✗ Error: {arm} (seed {seed}) failed. {e}")
                return
            rows.append(row)
            print(f"✓ {arm:<8} seed {seed}: task exact-match {row['task_exact_match']:.3f}")

    results = pd.DataFrame(rows)
    OUTPUT_DIR.mkdir(parents=True, exist_ok=True)
    results.to_csv(OUTPUT_DIR / "ablation_runs.csv", index=False)
    summary = results.groupby("arm")[["task_exact_match", "exact_match"]].mean()
    summary.to_csv(OUTPUT_DIR / "ablation_summary.csv")
    print("\nMean over seeds:")
    print(summary.to_string(float_format=lambda v: f"{v:.3f}"))

    full = summary.loc["full", "task_exact_match"]
    for arm in DROP_ARMS:
        if full > summary.loc[arm, "task_exact_match"]:
            print(f"✓ full ({full:.3f}) beats {arm} ({summary.loc[arm, 'task_exact_match']:.3f})")
        else:
            print(f"✗ full ({full:.3f}) does not beat {arm} ({summary.loc[arm, 'task_exact_match']:.3f})")

    no_cl = results[results["arm"] == "no_cl"]
    if (no_cl["final_task_loss"] == no_cl["final_total_loss"]).all():
        print("✓ no_cl total loss equals the task loss")

    print("--- Pipeline Finished ---")


if __name__ == "__main__":
    main()
