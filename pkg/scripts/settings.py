"""
Configuration discovery and logging setup
"""
import logging
import os
import sys
from typing import Any, Dict, Iterable, Optional

import yaml

DEFAULT_STORAGE_PATH = "~/.pcd-forecast"
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_config(config_path: Optional[str] = None) -> Dict:
    """Load optional YAML configuration, first existing file wins"""
    paths_to_try = []
    if config_path:
        paths_to_try.append(config_path)
        if not os.path.exists(config_path):
            # an explicit path that does not exist is an error, not a silent default
            raise FileNotFoundError(f"config file not found: {config_path}")
    paths_to_try += [
        "config/config.yaml",
        os.path.join(BASE_DIR, "config", "config.yaml"),
        os.path.expanduser(os.path.join(DEFAULT_STORAGE_PATH, "config.yaml")),
    ]

    for path in paths_to_try:
        if os.path.exists(path):
            with open(path, "r") as f:
                return yaml.safe_load(f) or {}

    return {}


def merge_options(
    command: str,
    flags: Dict[str, Any],
    config: Dict,
    defaults: Dict[str, Any],
    keys: Optional[Iterable[str]] = None,
    sections: Iterable[str] = (),
) -> Dict[str, Any]:
    """
    Resolve options as defaults < config (top level, then the command section) < flags.

    Flags whose value is None count as "not given". Config keys may use dashes or underscores.
    Top-level keys named in `sections` (and `storage`) are command sections, not options;
    any other top-level mapping, such as a `synth_spec` mapping, is an option value.
    """
    def normalize(section: Dict) -> Dict[str, Any]:
        return {str(k).replace("-", "_"): v for k, v in (section or {}).items()}

    skip = {str(s).replace("-", "_") for s in sections} | {"storage"}
    top = normalize({k: v for k, v in config.items() if str(k).replace("-", "_") not in skip})
    section = normalize(config.get(command) or config.get(command.replace("-", "_")) or {})
    names = set(keys) if keys is not None else set(defaults) | set(flags)

    resolved = {}
    for name in names:
        value = defaults.get(name)
        if name in top:
            value = top[name]
        if name in section:
            value = section[name]
        if flags.get(name) is not None:
            value = flags[name]
        resolved[name] = value
    return resolved


def storage_dir(config: Dict, override: Optional[str] = None) -> str:
    path = override or (config.get("storage") or {}).get("path") or DEFAULT_STORAGE_PATH
    path = os.path.expanduser(path)
    os.makedirs(path, exist_ok=True)
    return path


def setup_logging(verbose: bool = False) -> None:
    """Configure root logging once; stderr only, no timestamps"""
    root = logging.getLogger()
    level = logging.DEBUG if verbose else logging.INFO
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    root.setLevel(level)
