import io
import logging
import math
from pathlib import Path
from types import MappingProxyType
from typing import BinaryIO, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Union

import pandas as pd
from pydantic import ValidationError

from src.exceptions import DatasetError, DatasetParseError, DuplicateKeyError
from src.schemas import HP_FIELDS, EvalRecord, FidelityPoint, HPConfig, SearchSpace

logger = logging.getLogger(__name__)

CSV_COLUMNS = HP_FIELDS + ("epsilon", "epochs", "attack_iters", "std_error", "adv_error",
                           "train_time_s", "seed")
INT_COLUMNS = frozenset({"st_batch", "at_batch", "rat_pct", "ae_pct", "epochs", "attack_iters", "seed"})
# the header is line 1
FIRST_DATA_LINE = 2

Source = Union[str, Path, BinaryIO]


def same_epsilon(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-12)


def format_key(key: tuple) -> str:
    config, fidelity, epsilon, seed = key
    hps = ", ".join(f"{name}={value}" for name, value in zip(HP_FIELDS, config))
    return f"({hps}; epochs={fidelity[0]}, attack_iters={fidelity[1]}; epsilon={epsilon}; seed={seed})"


class TabularDataset:
    """
    Immutable collection of evaluation records keyed by (config, fidelity, epsilon, seed).

    The dataset plays the role of a replay oracle: every measured outcome of the
    grid sweep is kept here and looked up by the analysis and the tuning harness.
    """

    def __init__(self, records: Iterable[EvalRecord], space: Optional[SearchSpace] = None,
                 provenance: Optional[Mapping[str, str]] = None, first_row: int = 0):
        table: Dict[tuple, EvalRecord] = {}
        for row, record in enumerate(records, start=first_row):
            if record.key in table:
                raise DuplicateKeyError(row, format_key(record.key))
            table[record.key] = record
        self._records = MappingProxyType(table)
        self.space = space
        self.provenance = MappingProxyType(dict(provenance or {}))

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[EvalRecord]:
        return iter(self._records.values())

    def __contains__(self, key: tuple) -> bool:
        return key in self._records

    @property
    def records(self) -> List[EvalRecord]:
        return list(self._records.values())

    def keys(self) -> frozenset:
        return frozenset(self._records)

    def sorted_records(self) -> List[EvalRecord]:
        return [self._records[key] for key in sorted(self._records)]

    def epsilons(self) -> List[float]:
        values: List[float] = []
        for eps in sorted({record.epsilon for record in self}):
            if not values or not same_epsilon(values[-1], eps):
                values.append(eps)
        return values

    def fidelities(self) -> List[FidelityPoint]:
        return sorted({record.fidelity for record in self}, key=FidelityPoint.astuple)

    def configs(self) -> List[HPConfig]:
        return sorted({record.config for record in self}, key=HPConfig.astuple)

    def full_fidelity(self) -> FidelityPoint:
        """
        The maximum fidelity present: largest epochs count and largest attack iteration count.
        """
        if not self._records:
            raise DatasetError("Empty dataset has no fidelity levels")
        return FidelityPoint(epochs=max(r.fidelity.epochs for r in self),
                             attack_iters=max(r.fidelity.attack_iters for r in self))

    def select(self, epsilon: Optional[float] = None, fidelity: Optional[FidelityPoint] = None,
               predicate: Optional[Callable[[EvalRecord], bool]] = None) -> List[EvalRecord]:
        """
        Filter records.

        :param epsilon: Optional[float]: Keep records at this bound (tolerant comparison)
        :param fidelity: Optional[FidelityPoint]: Keep records at this fidelity
        :param predicate: Optional[Callable]: Extra record filter
        :return: Matching records in insertion order
        """
        selected = []
        for record in self:
            if epsilon is not None and not same_epsilon(record.epsilon, epsilon):
                continue
            if fidelity is not None and record.fidelity != fidelity:
                continue
            if predicate is not None and not predicate(record):
                continue
            selected.append(record)
        return selected


def record_to_row(record: EvalRecord) -> Dict[str, str]:
    values = dict(zip(HP_FIELDS, record.config.astuple()))
    values.update(epsilon=record.epsilon, epochs=record.fidelity.epochs,
                  attack_iters=record.fidelity.attack_iters, std_error=record.std_error,
                  adv_error=record.adv_error, train_time_s=record.train_time, seed=record.seed)
    return {name: str(int(values[name])) if name in INT_COLUMNS else repr(float(values[name]))
            for name in CSV_COLUMNS}


def _parse_field(row: int, column: str, text: str):
    try:
        value = int(text) if column in INT_COLUMNS else float(text)
    except ValueError:
        raise DatasetParseError(row, column, f"'{text}' is not a valid {'integer' if column in INT_COLUMNS else 'number'}")
    if column not in INT_COLUMNS and not math.isfinite(value):
        raise DatasetParseError(row, column, f"'{text}' is not finite")
    return value


def record_from_row(row: int, fields: Mapping[str, str]) -> EvalRecord:
    values = {column: _parse_field(row, column, fields[column]) for column in CSV_COLUMNS}
    try:
        return EvalRecord(
            config=HPConfig(**{name: values[name] for name in HP_FIELDS}),
            fidelity=FidelityPoint(epochs=values["epochs"], attack_iters=values["attack_iters"]),
            epsilon=values["epsilon"],
            std_error=values["std_error"],
            adv_error=values["adv_error"],
            train_time=values["train_time_s"],
            seed=values["seed"],
        )
    except ValidationError as err:
        raise DatasetError(f"Invalid record at row {row}: {err}")


def _read_frame(source: Source) -> pd.DataFrame:
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DatasetError("Dataset file is empty (missing header)")
    if tuple(frame.columns) != CSV_COLUMNS:
        raise DatasetError(f"Unexpected header {','.join(map(str, frame.columns))}; "
                           f"expected {','.join(CSV_COLUMNS)}")
    return frame


def load_dataset(source: Source, space: Optional[SearchSpace] = None) -> TabularDataset:
    """
    Load a dataset from a CSV byte stream or path.

    :param source: Source: Path or binary stream holding the CSV
    :param space: Optional[SearchSpace]: Search space to attach as metadata
    :return: The dataset, one record per row
    :raises DatasetParseError, DuplicateKeyError: with ``row`` set to the 1-based file line (header is line 1)
    """
    frame = _read_frame(source)
    records = [record_from_row(line, dict(zip(CSV_COLUMNS, values)))
               for line, values in enumerate(frame.itertuples(index=False, name=None), start=FIRST_DATA_LINE)]
    name = str(source) if isinstance(source, (str, Path)) else getattr(source, "name", "<stream>")
    logger.debug("Loaded %d records from %s", len(records), name)
    return TabularDataset(records, space=space, provenance={"source": str(name)}, first_row=FIRST_DATA_LINE)


def _frame(records: Iterable[EvalRecord]) -> pd.DataFrame:
    return pd.DataFrame([record_to_row(record) for record in records], columns=list(CSV_COLUMNS))


def save_dataset(ds: TabularDataset, sink: Source) -> None:
    """
    Write a dataset as CSV, rows sorted by key so that the output is byte deterministic.
    Floats are written with their shortest round-trip representation.

    :param ds: TabularDataset: Dataset to save
    :param sink: Source: Path or binary stream
    :return: None
    """
    if len(ds) == 0:
        raise DatasetError("Refusing to save an empty dataset")
    payload = _frame(ds.sorted_records()).to_csv(index=False, lineterminator="\n").encode("utf-8")
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(payload)
    else:
        sink.write(payload)


def dump_dataset(ds: TabularDataset) -> bytes:
    buffer = io.BytesIO()
    save_dataset(ds, buffer)
    return buffer.getvalue()


class DatasetAppender:
    """
    Single-writer append log used while a sweep is in progress. Rows are flushed
    one at a time so an interrupted sweep can be resumed from the file.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._handle = None

    def __enter__(self) -> "DatasetAppender":
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._handle = self.path.open("a", encoding="utf-8", newline="")
        if fresh:
            self._handle.write(",".join(CSV_COLUMNS) + "\n")
        return self

    def write(self, record: EvalRecord) -> None:
        _frame([record]).to_csv(self._handle, header=False, index=False, lineterminator="\n")
        self._handle.flush()

    def __exit__(self, *exc) -> None:
        self._handle.close()
        self._handle = None
