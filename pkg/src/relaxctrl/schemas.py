"""JSON schemas of the files written by the command-line interface."""

from __future__ import annotations

_NUM = {"type": ["number", "null"]}
_NUMS = {"type": "array", "items": _NUM}

METADATA = {
    "type": "object",
    "required": ["timestamp", "wall_time", "backend", "version"],
    "properties": {
        "timestamp": {"type": "string"},
        "wall_time": {"type": "number", "minimum": 0},
        "backend": {"type": "string", "enum": ["compiled", "python"]},
        "version": {"type": "string"},
    },
}


def _envelope(payload: dict) -> dict:
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "required": ["payload", "metadata"],
        "additionalProperties": False,
        "properties": {"payload": payload, "metadata": METADATA},
    }


SOLVE_REPORT = _envelope({
    "type": "object",
    "required": ["command", "config", "report", "weights"],
    "properties": {
        "command": {"const": "solve"},
        "config": {"type": "object"},
        "weights": {"type": "array"},
        "report": {
            "type": "object",
            "required": ["kind", "termination", "converged", "iterations", "final_cost", "max_residual",
                         "cost_history", "residual_history", "gap_history", "residual_profile",
                         "hamiltonian_profile", "hamiltonian_dispersion"],
            "properties": {
                "kind": {"const": "solve_report"},
                "termination": {"enum": ["converged", "max_iters", "stalled"]},
                "converged": {"type": "boolean"},
                "iterations": {"type": "integer", "minimum": 0},
                "final_cost": _NUM,
                "max_residual": _NUM,
                "cost_history": _NUMS,
                "residual_history": _NUMS,
                "gap_history": _NUMS,
                "residual_profile": _NUMS,
                "hamiltonian_profile": _NUMS,
                "hamiltonian_dispersion": _NUM,
            },
        },
    },
})

_CHECK = {
    "type": "object",
    "required": ["name", "passed", "value", "tolerance"],
    "properties": {"name": {"type": "string"}, "passed": {"type": "boolean"}},
}

VERIFY_REPORT = _envelope({
    "type": "object",
    "required": ["command", "config", "checks", "passed"],
    "properties": {
        "command": {"const": "verify"},
        "config": {"type": "object"},
        "checks": {"type": "array", "items": _CHECK, "minItems": 1},
        "passed": {"type": "boolean"},
    },
})

CHATTER_REPORT = _envelope({
    "type": "object",
    "required": ["command", "config", "relaxed_cost", "rows"],
    "properties": {
        "command": {"const": "chatter"},
        "config": {"type": "object"},
        "relaxed_cost": {"type": "number"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["k", "classical_cost", "relaxed_cost_refined", "gap", "gap_to_optimum"],
                "properties": {"k": {"type": "integer", "minimum": 1}},
            },
        },
    },
})

PRESETS_TABLE = {
    "type": "array",
    "minItems": 3,
    "items": {
        "type": "object",
        "required": ["name", "semi_monotone", "differentiable", "autonomous", "orientor_convex", "quadratic"],
    },
}

CONTROL = {
    "type": "object",
    "required": ["kind", "grid", "weights"],
    "properties": {"kind": {"enum": ["relaxed_control", "spacetime_young_measure"]}},
}

TRAJECTORY_CSV_COLUMNS = ("k", "t")

ALL = {"solve": SOLVE_REPORT, "verify": VERIFY_REPORT, "chatter": CHATTER_REPORT, "presets": PRESETS_TABLE,
       "control": CONTROL}
