#!/usr/bin/env python3
"""
Pipeline Configuration Checker
Prints the effective configuration and which artifacts already exist
"""

import argparse
import os

from vertebra_locator.config import ENV_PREFIX, format_value, load_config, options
from vertebra_locator.errors import ConfigError


def check_configuration(path=None):
    """Check the config file, environment overrides and artifact paths"""
    print("🔍 Pipeline Configuration Check")
    print("=" * 50)

    if path and os.path.exists(path):
        print(f"✅ {path} found and loaded")
    elif path:
        print(f"❌ {path} not found")
        return 2
    else:
        print("⚠️ No config file given, using built-in defaults")

    overrides = sorted(k for k in os.environ if k.startswith(ENV_PREFIX))
    for key in overrides:
        print(f"⚠️ {key} overrides the file value")

    try:
        config = load_config(path)
    except ConfigError as e:
        print(f"❌ {e}")
        return 2

    print("\n📋 Settings:")
    for attr, key, kind, doc in options():
        value = format_value(kind, getattr(config, attr))
        print(f"✅ {key}: {value or '(auto)'} ({doc})")

    print("\n🗂️ Artifacts:")
    artifacts = {
        "training set": config.train_manifest_path(),
        "evaluation set": config.test_manifest_path(),
        "network model": config.model_file(),
        "kernel bundle": config.kernel_file(),
        "shape dictionary": config.dictionary_path() / "dictionary_x.csv",
    }
    for name, artifact in artifacts.items():
        if artifact.exists():
            print(f"✅ {name}: {artifact}")
        else:
            print(f"⚠️ {name}: not built yet ({artifact})")

    print("\n" + "=" * 50)
    print("Configuration check complete!")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("config", nargs="?", help="KEY=value config file")
    raise SystemExit(check_configuration(parser.parse_args().config))
