# logger.py - Terminal interno de colon_recon (log JSON fuera de los artefactos)
import json
import os
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

# Configuración
ROOT = Path(__file__).resolve().parent
LOG_ENV = "COLON_RECON_LOG"
MAX_LINES = 5000
LOG_TYPES = ("SYSTEM", "WARNING", "ERROR", "RENDER", "LOSSES", "REFINE", "FUSION", "EVALUATE")

_log_file: Path = Path(os.environ.get(LOG_ENV) or ROOT / "log.json")

# Lock para thread safety (--jobs escribe desde varios hilos)
_lock = threading.RLock()


def set_log_file(path) -> Path:
    """Redirige el log a otro archivo (tests, corridas aisladas)."""
    global _log_file
    with _lock:
        _log_file = Path(path)
    return _log_file


def get_log_file() -> Path:
    return _log_file


def _ensure_log_file():
    """Garantiza que el archivo de log existe con estructura válida."""
    if not _log_file.exists():
        try:
            _log_file.parent.mkdir(parents=True, exist_ok=True)
            with open(_log_file, "w", encoding="utf-8") as f:
                json.dump({"logs": []}, f, ensure_ascii=False, indent=2)
        except OSError as e:
            print(f"[logger] Error creando {_log_file.name}: {e}")


def _load_logs() -> List[Dict[str, Any]]:
    try:
        _ensure_log_file()
        with open(_log_file, "r", encoding="utf-8") as f:
            return json.load(f).get("logs", [])
    except (OSError, json.JSONDecodeError) as e:
        print(f"[logger] Error cargando logs: {e}")
        return []


def _save_logs(logs):
    try:
        with open(_log_file, "w", encoding="utf-8") as f:
            json.dump({"logs": logs}, f, ensure_ascii=False, indent=2)
    except OSError as e:
        print(f"[logger] Error guardando logs: {e}")


def printTerminal(log_type, message):
    """
    Registra un mensaje en el terminal interno y lo replica en consola.

    Args:
        log_type: system, warning, error, render, losses, refine, fusion, evaluate
        message: Mensaje a registrar
    """
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    kind = str(log_type).upper()
    try:
        with _lock:
            logs = _load_logs()
            logs.insert(0, {
                "timestamp": timestamp,
                "type": kind,
                "message": str(message).strip(),
                "id": (logs[0].get("id", 0) + 1) if logs else 1,
            })
            # línea 0 = más nuevo
            if len(logs) > MAX_LINES:
                logs = logs[:MAX_LINES]
            _save_logs(logs)
    except Exception as e:
        print(f"[{timestamp}] [LOGGER_ERROR] Failed to log: {e}")
    print(f"[{timestamp}] [{kind}] {message}")


def get_terminal_logs(limit: int = 100, log_filter: Optional[str] = None) -> List[Dict[str, Any]]:
    """Últimos `limit` logs, opcionalmente filtrados por tipo."""
    with _lock:
        logs = _load_logs()
    if log_filter and log_filter.upper() in LOG_TYPES:
        logs = [log for log in logs if log.get("type") == log_filter.upper()]
    return logs[:limit]


def clear_terminal_logs():
    with _lock:
        _save_logs([])
    # fuera del lock
    printTerminal("system", "Terminal limpiado")


def get_terminal_stats() -> Dict[str, Any]:
    with _lock:
        logs = _load_logs()
    stats = {"total_logs": len(logs), "by_type": {}}
    for log in logs:
        kind = log.get("type", "UNKNOWN")
        stats["by_type"][kind] = stats["by_type"].get(kind, 0) + 1
    return stats


def init_logger():
    _ensure_log_file()
