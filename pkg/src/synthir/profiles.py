"""Per-corpus-size hyperparameter profiles.

``small`` matches the message-sized corpus settings (10 mined negatives,
8 training negatives, batch 16, lr 1e-6); ``large`` the email-sized corpus
(25 mined, 20 training, batch 64, lr 1e-5). Everything else is shared.
"""

PROFILES = {
    "small": {"mined_k": 10, "negatives_per_sample": 8, "batch_size": 16, "base_lr": 1e-6},
    "large": {"mined_k": 25, "negatives_per_sample": 20, "batch_size": 64, "base_lr": 1e-5},
}


def profile(name: str) -> dict:
    try:
        return dict(PROFILES[name])
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None
