"""
Fixture initialization script.
Re-canonicalizes the shipped MFSC documents and exports the synthetic PCB
suite as FGADFEAT feature files plus a feature-import run config.
"""

import json
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from captioner.mfsc import load_document, serialize
from detector.config import DOCUMENTS_DIR, FIXTURES_DIR, load_run_config
from detector.encoder import encode_scene, encode_scene_highres, save_feature_file
from detector.pipeline import make_suite

FEATURES_DIR = FIXTURES_DIR / "features"
PCB_CONFIG = FIXTURES_DIR / "configs" / "pcb.json"
FEATURE_CONFIG = FIXTURES_DIR / "configs" / "pcb_features.json"


def canonicalize_documents(documents_dir: Path) -> int:
    """
    Rewrites every MFSC document in canonical form.

    Returns:
        Number of documents written
    """
    count = 0
    for path in sorted(documents_dir.glob("*.json")):
        text = serialize(load_document(path))
        if path.read_text(encoding="utf-8") != text:
            path.write_text(text, encoding="utf-8")
            print(f"  rewrote {path.name}")
        count += 1
    return count


def export_features(config_path: Path, out_dir: Path, config_out: Path) -> int:
    """
    Encodes the configured suite to FGADFEAT files and writes a
    feature-import config that points at them.

    Returns:
        Number of feature files written
    """
    cfg = load_run_config(config_path)
    suite = make_suite(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    rel = lambda p: str(p.relative_to(cfg.resolve(".")))

    shots, shots_highres, queries = [], [], []
    for i, scene in enumerate(suite.shots):
        native = out_dir / f"shot_{i}.fgadfeat"
        big = out_dir / f"shot_{i}_highres.fgadfeat"
        save_feature_file(encode_scene(scene, cfg.encoder), native)
        save_feature_file(encode_scene_highres(scene, cfg.encoder, cfg.highres_factor, cfg.workers), big)
        shots.append(rel(native))
        shots_highres.append(rel(big))
    for i, scene in enumerate(suite.tests):
        path = out_dir / f"query_{i}.fgadfeat"
        save_feature_file(encode_scene(scene, cfg.encoder), path)
        entry = {"path": rel(path), "anomalous": bool(scene.anomaly_mask.any())}
        if entry["anomalous"]:
            mask_path = out_dir / f"query_{i}_mask.json"
            mask_path.write_text(json.dumps(scene.anomaly_mask.astype(int).tolist()) + "\n", encoding="utf-8")
            entry["mask"] = rel(mask_path)
        queries.append(entry)

    raw = cfg.model_dump(mode="json", exclude={"layout", "suite", "null_suite", "features"})
    raw["category"] = f"{cfg.category}_features"
    raw["mode"] = "feature-import"
    raw["features"] = {"shots": shots, "shots_highres": shots_highres, "queries": queries}
    config_out.write_text(json.dumps(raw, indent=2) + "\n", encoding="utf-8")
    return len(shots) * 2 + len(queries)


def main() -> None:
    """Main initialization function."""
    print("=" * 60)
    print("FIXTURE INITIALIZATION")
    print("=" * 60)

    print("\n[STEP] Canonicalizing MFSC documents...")
    n_docs = canonicalize_documents(DOCUMENTS_DIR)
    print(f"  {n_docs} documents")

    print("\n[STEP] Exporting feature files...")
    n_files = export_features(PCB_CONFIG, FEATURES_DIR, FEATURE_CONFIG)
    print(f"  {n_files} feature files, config {FEATURE_CONFIG.name}")

    print("\n" + "=" * 60)
    print("[OK] INITIALIZATION COMPLETED SUCCESSFULLY")
    print("=" * 60)
    print("\nNext steps:")
    print("1. Install dependencies: pip install -r requirements.txt")
    print("2. Run tests: pytest scripts/tests")
    print(f"3. Feature-import run: python scripts/fgad.py --config {FEATURE_CONFIG.relative_to(FIXTURES_DIR.parent)} eval")


if __name__ == "__main__":
    try:
        main()
    except KeyboardInterrupt:
        print("\n\nInitialization interrupted by user")
        sys.exit(1)
    except Exception as e:
        print(f"\n[ERROR] Fatal error: {str(e)}", file=sys.stderr)
        sys.exit(1)
