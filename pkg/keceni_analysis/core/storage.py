"""
结果存储模块
每次运行一个输出目录：manifest.json + 若干 CSV/JSON 结果
使用 JSON 与 CSV，方便查看和作图
"""
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from keceni_analysis.core.config import settings
from keceni_analysis.core.models import _jsonable

logger = logging.getLogger(__name__)


class StorageManager:
    """运行结果存储管理器"""

    def __init__(self, storage_dir=None):
        self.storage_dir = Path(storage_dir) if storage_dir is not None else settings.OUTPUT_DIR
        self.storage_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_file = self.storage_dir / "manifest.json"

    def path(self, name: str) -> Path:
        return self.storage_dir / name

    def save_manifest(self, command: str, config: Dict, extra: Optional[Dict] = None):
        """写出可复现本次运行的完整配置"""
        data = {
            "command": command,
            "version": settings.VERSION,
            "config": config,
        }
        if extra:
            data.update(extra)
        self.save_json("manifest.json", data)
        logger.info("%s 运行记录写入 %s (%s)", command, self.manifest_file, datetime.now().isoformat(timespec="seconds"))

    def load_manifest(self) -> Dict:
        if not self.manifest_file.exists():
            return {}
        with open(self.manifest_file, "r", encoding="utf-8") as f:
            return json.load(f)

    def save_json(self, name: str, data) -> Path:
        target = self.path(name)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(_jsonable(data), f, ensure_ascii=False, indent=2)
        logger.debug("写出 %s", target)
        return target

    def save_csv(self, name: str, df: pd.DataFrame) -> Path:
        target = self.path(name)
        df.to_csv(target, index=False, encoding="utf-8")
        logger.debug("写出 %s (%s 行)", target, len(df))
        return target

    def save_rows(self, name: str, rows: List[Dict], columns: List[str]) -> Path:
        return self.save_csv(name, pd.DataFrame(rows, columns=columns))
