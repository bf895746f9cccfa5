# errors.py - Jerarquía de errores del toolkit
from typing import Any, Dict, Optional

import numpy as np


class ColonReconError(Exception):
    """Error base de colon_recon. Cada subclase define su exit code para el CLI."""

    exit_code = 1

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def with_context(self, context: str) -> "ColonReconError":
        """Devuelve una copia del error con un prefijo de contexto (frame, iteración)."""
        err = type(self).__new__(type(self))
        err.__dict__.update(self.__dict__)
        err.args = (f"{context}: {self}",)
        return err


class InvalidInputError(ColonReconError, ValueError):
    """Precondición violada o parámetro fuera de rango."""

    exit_code = 1


class SingularityError(InvalidInputError):
    """Profundidad nula donde el modelo de luz diverge."""


class EmptySupportError(ColonReconError):
    """La máscara no deja ningún píxel válido."""

    exit_code = 2


class DegenerateDataError(ColonReconError):
    """Configuración de puntos degenerada (colineal, rango deficiente)."""

    exit_code = 2


class SolverError(ColonReconError):
    """Sistema lineal singular o energía no finita."""

    exit_code = 2


class OptimizerError(SolverError):
    """Energía no finita durante la optimización."""


class DatasetIOError(ColonReconError, OSError):
    """Fallo de lectura/escritura con la ruta involucrada."""

    exit_code = 3

    def __init__(self, message: str, path=None, diagnostics: Optional[Dict[str, Any]] = None):
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message, diagnostics)
        self.path = path


def exit_code_for(exc: BaseException) -> int:
    """Traduce una excepción al exit code del CLI."""
    if isinstance(exc, ColonReconError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 3
    # fallas numéricas fuera de la jerarquía cuentan como falla del solver
    if isinstance(exc, (ArithmeticError, np.linalg.LinAlgError)):
        return 2
    if isinstance(exc, ValueError):
        return 1
    return 1
