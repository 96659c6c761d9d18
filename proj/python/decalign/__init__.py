"""Likelihood/utility alignment experiments: decoders, value models and analysis."""

from decalign._core import (
    DecalignError,
    ConfigError,
    Vocabulary,
    LanguageModel,
    TabularLM,
    Hypothesis,
    DecodeResult,
    ValueModel,
    UniformNoiseValue,
    LookaheadValue,
    PlantedTask,
    greedy,
    beam,
    sample,
    stochastic_beam,
    vgbs,
    mcts,
    enumerate_sequences,
    bleu4,
    exact_match,
    pearson,
    kendall_tau_b,
    spearman,
    bootstrap_mean_ci,
    brute_force_oracle,
    generate_misaligned_task,
    run_config,
)

__all__ = [name for name in dir() if not name.startswith("_")]
