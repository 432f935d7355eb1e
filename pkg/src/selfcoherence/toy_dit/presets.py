"""Named configurations for the toy model.

``ACCEPTANCE_PRESET`` is the end-to-end binding setup: small enough to train
in under 15 minutes on one CPU core, large enough for the cross-attention maps
to localise the two shapes.
"""

ACCEPTANCE_PRESET = {
    "seed": 0,
    "num_steps": 50,
    "dataset": {"grid": (12, 12), "shape_size": 5, "num_samples": 4096},
    "model": {"embed_dim": 32, "num_blocks": 4, "num_heads": 4, "stem_kernel": 3},
    "train": {
        "epochs": 1000,
        "max_steps": 5500,
        "lr": 2e-3,
        "batch_size": 32,
        "optimizer": "adam",
    },
}


def acceptance_run_config(run_id: str = "toy", output_dir: str = "runs") -> dict:
    """The acceptance preset as a CLI run config."""
    p = ACCEPTANCE_PRESET
    return {
        "run_id": run_id,
        "output_dir": output_dir,
        "seed": p["seed"],
        "dataset": {**p["dataset"], "grid": list(p["dataset"]["grid"])},
        "model": dict(p["model"]),
        "schedule": {"num_steps": p["num_steps"]},
        "train": dict(p["train"]),
        "guidance": {"amplification_factor": 4.0, "mask_method": "kmeans"},
        "bench": {
            "counts": {"coarse": 8},
            "templates": ["coarse"],
            "vocab": {"colors": ["red", "green", "blue", "yellow"], "concepts": ["square", "disc", "triangle"]},
        },
    }
