from typing import Optional

import numpy as np

from sbt.errors import ConfigError
from sbt.model import ModelConfig, TransformerModel

from utils.get_env import SBT_SEED


def get_model(config: ModelConfig,
              seed: Optional[int] = None,
              dense: Optional[bool] = None,
              ) -> TransformerModel:
    """
    Build a fresh model for a preset or config file.

    :param config: validated model config
    :type config: ModelConfig
    :param seed: overrides config.seed; SBT_SEED from env when neither is set
    :type seed: int | None
    :param dense: force the dense twin (True) or the SBT twin (False)
    :type dense: bool | None
    :return: trainable model with seeded latent weights and scores
    :rtype: TransformerModel
    """

    if dense is not None and dense != config.dense_mode:
        config = config.dense_twin() if dense else config.sbt_twin()
    if seed is not None:
        config = config.with_updates(seed=seed)
    elif "seed" not in config.model_fields_set:
        config = config.with_updates(seed=SBT_SEED)

    match config.task:
        case "classification":
            print(f"building {'dense' if config.dense_mode else 'SBT'} classifier {config.name} "
                  f"(d={config.d}, classes={config.n_classes}, attention={config.attention}).")
        case "anomaly" | "forecasting":
            print(f"building {'dense' if config.dense_mode else 'SBT'} {config.task} model {config.name} "
                  f"(d={config.d}, w={config.w}, attention={config.attention}).")
        case _:
            raise ConfigError(f"Unsupported task: {config.task}")

    return TransformerModel(config, np.random.default_rng(config.seed))
