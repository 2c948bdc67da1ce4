# Copyright (C) 2026 The llmctx Authors
# SPDX-License-Identifier: Apache-2.0

from ._core import (
    CallResult,
    Engine,
    Error,
    default_ratios,
    generate_trace,
    plan_pipeline,
    policy_names,
    quantize_roundtrip,
    replay,
    solve_thresholds,
)

__all__ = [
    "CallResult",
    "Engine",
    "Error",
    "default_ratios",
    "generate_trace",
    "plan_pipeline",
    "policy_names",
    "quantize_roundtrip",
    "replay",
    "solve_thresholds",
]
