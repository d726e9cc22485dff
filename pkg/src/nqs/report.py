"""Report files: versioned JSON documents produced by the CLI.

A report records fitted parameters, objective values, the configuration
used, and the random seed, so predictions can be reproduced exactly from
the file alone. Floats survive the round trip bit-exactly (shortest-repr
encoding), there are no timestamps, and keys are sorted, so identical
inputs give byte-identical files.
"""

from __future__ import annotations

import json
from typing import Union

from .chinchilla import ChinParams
from .params import NqsParams

__all__ = ["load_params", "load_report", "save_report"]

REPORT_VERSION = 1


class ReportError(Exception):
    pass


def save_report(doc: dict, path: str) -> None:
    if "version" not in doc or "kind" not in doc:
        raise ReportError("report documents need 'version' and 'kind' fields")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path: str) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path} is not a valid report: {exc}") from None
    if not isinstance(doc, dict) or "kind" not in doc or "version" not in doc:
        raise ReportError(f"{path} is not a report (missing kind/version)")
    if doc["version"] != REPORT_VERSION:
        raise ReportError(
            f"{path} has report version {doc['version']!r}, expected {REPORT_VERSION}"
        )
    return doc


def load_params(path: str) -> Union[NqsParams, ChinParams]:
    """Pull the fitted parameters out of a report of either kind."""
    doc = load_report(path)
    kind = doc["kind"]
    if kind == "nqs_fit":
        return NqsParams(**{k: float(v) for k, v in doc["theta"].items()})
    if kind == "chinchilla_fit":
        return ChinParams(**{k: float(v) for k, v in doc["phi"].items()})
    raise ReportError(f"{path}: no fitted parameters in a {kind!r} report")
