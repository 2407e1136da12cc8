import json
from pathlib import Path

from packaging import version

VERSION_FILE = Path(__file__).parent.parent / "version.json"


class VersionManager:
    @staticmethod
    def get_local_info():
        try:
            with open(VERSION_FILE, "r", encoding="utf-8") as f:
                return json.load(f)
        except Exception:
            return {"version": "0.0.0", "report_schema": "1.0.0", "changelog": []}

    @staticmethod
    def tool_version() -> str:
        return VersionManager.get_local_info().get("version", "0.0.0")

    @staticmethod
    def report_schema_version() -> str:
        return VersionManager.get_local_info().get("report_schema", "1.0.0")

    @staticmethod
    def is_compatible(found: str, expected: str = None) -> bool:
        """Report schemas are compatible when their major versions agree."""
        expected = expected or VersionManager.report_schema_version()
        try:
            return version.parse(found).major == version.parse(expected).major
        except version.InvalidVersion:
            return False
