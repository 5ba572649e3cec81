"""Acquisition metadata, textual prompts and the word-level prompt tokenizer."""
import json
import re
from dataclasses import asdict, dataclass, fields
from decimal import Decimal
from typing import Iterable, List, Optional, Union

from src.errors import ArgumentError, DatasetError

PLANES = ("axial", "coronal", "sagittal")
NONE_TOKEN = "NONE"

PROMPT_TEMPLATE = (
    "A brain MRI, plane {plane}, "
    "Scanner (Manufacturer, Model, Field Strength): ({manufacturer}, {model}, {field}), "
    "Acquisition (Description, Sequence, Variant): ({description}, {sequence}, {variant}), "
    "Imaging Parameters (Echo Time, Repetition Time, Inversion Time, Flip Angle): ({te}, {tr}, {ti}, {flip})"
)

_PROMPT_PATTERN = re.compile(
    r"^A brain MRI, plane (?P<plane>\w+), "
    r"Scanner \(Manufacturer, Model, Field Strength\): \((?P<scanner>.*)\), "
    r"Acquisition \(Description, Sequence, Variant\): \((?P<acquisition>.*)\), "
    r"Imaging Parameters \(Echo Time, Repetition Time, Inversion Time, Flip Angle\): \((?P<params>[^()]*)\)$"
)

_TOKEN_PATTERN = re.compile(r"[\w.+/\-]+|[^\w\s]")


@dataclass(frozen=True)
class AcquisitionParams:
    """DICOM-derived description of one acquisition.

    Attributes:
        te_s (float): Echo time in seconds, >= 0
        tr_s (float): Repetition time in seconds, > 0
        ti_s (float): Inversion time in seconds, None when the sequence has no inversion
        flip_deg (float): Flip angle in degrees, in (0, 180]
        manufacturer (str):
        model (str):
        field_T (float): Field strength in tesla
        sequence (str): Sequence type, e.g. SE or SE_IR
        variant (str): Sequence variant, e.g. SK_SP_OSP
        description (str): Series description
        plane (str): One of axial, coronal, sagittal
    """
    te_s: float
    tr_s: float
    ti_s: Optional[float] = None
    flip_deg: Optional[float] = None
    manufacturer: Optional[str] = None
    model: Optional[str] = None
    field_T: Optional[float] = None
    sequence: Optional[str] = None
    variant: Optional[str] = None
    description: Optional[str] = None
    plane: str = "axial"

    def __post_init__(self):
        if self.te_s is None or self.te_s < 0:
            raise ArgumentError("te_s must be >= 0, got {}".format(self.te_s))
        if self.tr_s is None or self.tr_s <= 0:
            raise ArgumentError("tr_s must be > 0, got {}".format(self.tr_s))
        if self.ti_s is not None and self.ti_s <= 0:
            raise ArgumentError("ti_s must be > 0 when present, got {}".format(self.ti_s))
        if self.flip_deg is not None and not 0 < self.flip_deg <= 180:
            raise ArgumentError("flip_deg must lie in (0, 180], got {}".format(self.flip_deg))
        if self.field_T is not None and self.field_T <= 0:
            raise ArgumentError("field_T must be > 0, got {}".format(self.field_T))
        if self.plane not in PLANES:
            raise ArgumentError("plane must be one of {}, got {!r}".format(PLANES, self.plane))

    @property
    def is_inversion_recovery(self):
        """True when the sequence type names an inversion-recovery readout."""
        return self.sequence is not None and "IR" in re.split(r"[_\s]+", self.sequence.upper())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ArgumentError("unknown acquisition fields: {}".format(unknown))
        return cls(**data)

    def to_json(self, path):
        """Write the metadata sidecar JSON."""
        try:
            with open(path, "w") as f:
                json.dump(self.to_dict(), f, indent=2)
        except OSError as e:
            raise DatasetError("could not write metadata sidecar: {}".format(e), path)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError:
            raise DatasetError("metadata sidecar not found", path)
        except json.JSONDecodeError as e:
            raise DatasetError("metadata sidecar is not valid JSON: {}".format(e), path)


@dataclass(frozen=True)
class Prompt:
    text: str

    def __str__(self):
        return self.text


def format_number(value):
    """Minimal decimal rendering: trailing zeros stripped, no exponent, integers bare."""
    if value is None:
        return NONE_TOKEN
    text = format(Decimal(repr(float(value))).normalize(), "f")
    return text


def _field(value):
    if value is None:
        return NONE_TOKEN
    return str(value)


def build_prompt(acq):
    """Render the metadata prompt for an acquisition.

    Args:
        acq (AcquisitionParams): The acquisition to describe

    Return:
        Prompt: text following PROMPT_TEMPLATE, absent values rendered as NONE
    """
    text = PROMPT_TEMPLATE.format(
        plane=acq.plane,
        manufacturer=_field(acq.manufacturer),
        model=_field(acq.model),
        field=format_number(acq.field_T),
        description=_field(acq.description),
        sequence=_field(acq.sequence),
        variant=_field(acq.variant),
        te=format_number(acq.te_s),
        tr=format_number(acq.tr_s),
        ti=format_number(acq.ti_s),
        flip=format_number(acq.flip_deg),
    )
    return Prompt(text)


def _parse_text(value):
    return None if value == NONE_TOKEN else value


def _parse_number(value):
    if value == NONE_TOKEN:
        return None
    try:
        return float(value)
    except ValueError:
        raise ArgumentError("expected a number or NONE in prompt, got {!r}".format(value))


def parse_prompt(prompt):
    """Inverse of build_prompt.

    Args:
        prompt (Prompt or str): Text produced by build_prompt

    Return:
        AcquisitionParams
    """
    text = str(prompt)
    match = _PROMPT_PATTERN.match(text)
    if match is None:
        raise ArgumentError("text does not follow the prompt template: {!r}".format(text[:80]))
    scanner = match.group("scanner").split(", ")
    acquisition = match.group("acquisition").rsplit(", ", 2)
    params = match.group("params").split(", ")
    if len(scanner) != 3 or len(acquisition) != 3 or len(params) != 4:
        raise ArgumentError("prompt has the wrong number of fields: {!r}".format(text[:80]))
    manufacturer, model, field_t = scanner
    description, sequence, variant = acquisition
    te, tr, ti, flip = (_parse_number(p) for p in params)
    if te is None or tr is None:
        raise ArgumentError("prompt must carry echo and repetition times")
    return AcquisitionParams(
        te_s=te, tr_s=tr, ti_s=ti, flip_deg=flip,
        manufacturer=_parse_text(manufacturer), model=_parse_text(model),
        field_T=_parse_number(field_t),
        sequence=_parse_text(sequence), variant=_parse_text(variant),
        description=_parse_text(description),
        plane=match.group("plane"),
    )


def determine_plane(voxel_spacing):
    """Slicing plane from voxel spacing (sx, sy, sz) in mm.

    The plane is perpendicular to the axis with the largest spacing, so the
    in-plane pair is the highest-resolution one. Ties prefer axial, then
    coronal, then sagittal; isotropic spacing is axial.
    """
    if len(voxel_spacing) != 3:
        raise ArgumentError("voxel spacing needs three values, got {}".format(voxel_spacing))
    sx, sy, sz = (float(s) for s in voxel_spacing)
    if min(sx, sy, sz) <= 0:
        raise ArgumentError("voxel spacing must be positive, got {}".format(voxel_spacing))
    largest = max(sx, sy, sz)
    if sz == largest:
        return "axial"
    if sy == largest:
        return "coronal"
    return "sagittal"


def split_words(text):
    """Lower-cased word/punctuation split used by the tokenizer."""
    return _TOKEN_PATTERN.findall(str(text).lower())


class Vocabulary(object):
    """Word-level vocabulary frozen at pretraining time.

    Id 0 is padding and id 1 stands for unknown words.

    Attributes:
        tokens (list): Token strings indexed by id
    """
    PAD = "<pad>"
    UNK = "<unk>"
    pad_id = 0
    unk_id = 1

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:2] != [self.PAD, self.UNK]:
            raise ArgumentError("vocabulary must start with <pad>, <unk>")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts: Iterable[Union[str, Prompt]], min_count=1):
        """Build from a prompt corpus; words are ordered by first appearance."""
        counts = {}
        for text in texts:
            for word in split_words(text):
                counts[word] = counts.get(word, 0) + 1
        words = [w for w, c in counts.items() if c >= min_count]
        return cls([cls.PAD, cls.UNK] + words)

    def __len__(self):
        return len(self.tokens)

    def lookup(self, word):
        return self.index.get(word, self.unk_id)

    def to_dict(self):
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data):
        return cls(data["tokens"])


def tokenize_prompt(prompt, vocab, max_len=96) -> List[int]:
    """Token ids for a prompt, truncated or right-padded to ``max_len``.

    Args:
        prompt (Prompt or str): Prompt text; an empty string gives all padding
        vocab (Vocabulary): Frozen vocabulary
        max_len (int): Output length
    """
    if max_len < 1:
        raise ArgumentError("max_len must be positive")
    ids = [vocab.lookup(w) for w in split_words(prompt)][:max_len]
    return ids + [vocab.pad_id] * (max_len - len(ids))


def prompt_length(prompt):
    return len(split_words(prompt))
