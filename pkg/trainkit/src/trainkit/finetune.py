"""Fine-tuning launch glue: validate the export, then hand off.

No training loop lives here. The launcher validates the training file,
checks that the requested framework is importable, and materializes a
run directory with a manifest describing exactly what would be trained
(defaults: three epochs, batch size 2, learning-rate sweep endpoints
1e-4 down to 2e-5).
"""

from __future__ import annotations

import hashlib
import importlib.util
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .exportcheck import validate_export

DEFAULT_FRAMEWORK = "transformers"


@dataclass(frozen=True)
class FinetuneParams:
    """Hyperparameters for a fine-tuning run; all overridable."""

    epochs: int = 3
    batch_size: int = 2
    lr_start: float = 1e-4
    lr_end: float = 2e-5

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class RunHandle:
    """Where a prepared fine-tuning run lives on disk."""

    run_dir: Path
    manifest_path: Path
    manifest: dict = field(compare=False)


def _file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def launch_finetune(
    training_jsonl: str | Path,
    base_model: str,
    params: FinetuneParams | None = None,
    *,
    out_dir: str | Path | None = None,
    framework: str = DEFAULT_FRAMEWORK,
) -> RunHandle:
    """Prepare a fine-tuning run and emit its manifest.

    Raises SchemaError if the export is malformed and EnvironmentError
    if the training framework is not importable in this environment.
    """
    if not base_model:
        raise ValueError("base_model must be non-empty")
    params = params or FinetuneParams()
    source = Path(training_jsonl)
    report = validate_export(source)

    try:
        spec = importlib.util.find_spec(framework)
    except (ImportError, ValueError):
        spec = None
    if spec is None:
        raise EnvironmentError(
            f"training framework {framework!r} is not installed; install it "
            "or pass a different framework="
        )

    run_dir = (Path(out_dir) if out_dir is not None
               else source.parent / f"{source.stem}-finetune")
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "base_model": base_model,
        "framework": framework,
        "dataset": {
            "path": str(source.resolve()),
            "sha256": _file_sha256(source),
            "lines": report["lines"],
        },
        "hyperparameters": asdict(params),
        "label_counts": report["labels"],
        "eval_mode_counts": report["eval_modes"],
        "status": "prepared",
    }
    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return RunHandle(run_dir=run_dir, manifest_path=manifest_path,
                     manifest=manifest)
