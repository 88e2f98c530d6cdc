"""
Synthetic corpus setup
- Writes planted-cue MSA and ERC manifests.
- Completes their universal labels into one unified manifest ready for training.
"""
from pathlib import Path

from unimse.commands.prepare import AUDIT_FILE, UNIFIED_MANIFEST, write_audit
from unimse.commands.synthesize import write_synthetic
from unimse.config import derive_seeds, resolve_config
from unimse.datapipe import complete_manifest, write_manifest
from unimse.models import Split, Task
from unimse.unilabel import get_oracle

DATA_DIR = Path("data")


def create_synthetic_corpus(data_dir=DATA_DIR, n_train=32, n_valid=8, n_test=8, seed=0, signal_strength=2.0):
    """Write data/raw/{msa,erc}/manifest.jsonl"""
    counts = {"train": n_train, "valid": n_valid, "test": n_test}
    config = resolve_config(overrides=[f"synth.n_msa={counts}", f"synth.n_erc={counts}",
                                       f"synth.signal_strength={signal_strength}"], seed=seed)
    msa_path, erc_path, manifest = write_synthetic(config.synth, derive_seeds(seed).synth, Path(data_dir) / "raw")
    print(f"Wrote {len(manifest)} synthetic records")
    print(f"  MSA manifest: {msa_path}")
    print(f"  ERC manifest: {erc_path}")
    return manifest


def create_unified_dataset(manifest, data_dir=DATA_DIR, oracle="bow-cosine"):
    """Complete labels and write data/unified/manifest.jsonl plus the audit"""
    unified, audits, summary = complete_manifest(
        manifest.select(lambda r: r.task == Task.MSA),
        manifest.select(lambda r: r.task == Task.ERC),
        get_oracle(oracle),
    )
    out_dir = Path(data_dir) / "unified"
    path = write_manifest(unified, out_dir / UNIFIED_MANIFEST)
    write_audit(audits, out_dir / AUDIT_FILE)
    print(f"Completed {summary.generated_emotion} emotions and {summary.generated_intensity} intensities")
    print(f"  Unified manifest: {path}")
    return path


if __name__ == "__main__":
    print("Creating synthetic MSA and ERC corpora...")
    corpus = create_synthetic_corpus()

    print("\nCompleting universal labels...")
    unified_path = create_unified_dataset(corpus)

    train_count = sum(r.split == Split.TRAIN for r in corpus.records)
    print(f"\nDataset setup complete! {train_count} training records.")
    print(f"Train with: python -m unimse train --data {unified_path}")
