"""Dataset manifests: one line per utterance (id, speaker, relative path, duration)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .audio import AudioFormatError, Waveform, load_wav


class ManifestError(ValueError):
    """Manifest missing, malformed, or referencing bad audio."""


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    path: Path
    duration_s: float | None = None


class Manifest:
    def __init__(self, utterances: list[Utterance]):
        if not utterances:
            raise ManifestError("manifest is empty")
        ids = [u.utterance_id for u in utterances]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate utterance ids in manifest")
        self.utterances = sorted(utterances, key=lambda u: u.utterance_id)
        self.by_id = {u.utterance_id: u for u in self.utterances}
        self.by_speaker: dict[str, list[Utterance]] = {}
        for u in self.utterances:
            self.by_speaker.setdefault(u.speaker_id, []).append(u)
        self.speakers = sorted(self.by_speaker)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest {path} does not exist")
        root = path.parent
        utts = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise ManifestError(f"{path}:{lineno}: expected 3-4 tab-separated columns")
            duration = float(cols[3]) if len(cols) == 4 else None
            utts.append(Utterance(cols[0], cols[1], (root / cols[2]).resolve(), duration))
        return cls(utts)

    def write(self, path) -> None:
        path = Path(path)
        root = path.parent.resolve()
        lines = []
        for u in self.utterances:
            rel = u.path.resolve().relative_to(root) if u.path.is_relative_to(root) else u.path
            dur = f"\t{u.duration_s:.4f}" if u.duration_s is not None else ""
            lines.append(f"{u.utterance_id}\t{u.speaker_id}\t{rel}{dur}")
        path.write_text("\n".join(lines) + "\n")


class AudioStore:
    """Loads manifest audio once and keeps it in memory."""

    def __init__(self, manifest: Manifest, resample: bool = False):
        self.manifest = manifest
        self.resample = resample
        self._cache: dict[str, Waveform] = {}

    def get(self, utterance_id: str) -> Waveform:
        if utterance_id not in self._cache:
            utt = self.manifest.by_id.get(utterance_id)
            if utt is None:
                raise ManifestError(f"utterance {utterance_id} not in manifest")
            self._cache[utterance_id] = load_wav(utt.path, resample=self.resample)
        return self._cache[utterance_id]


def prepare_manifest(corpus_dir, out_path, *, resample: bool = False) -> Manifest:
    """Scan <corpus_dir>/<speaker>/<utt>.wav into a manifest, sorted by id.

    Every non-conforming file is collected and reported in one error rather
    than failing on the first.
    """
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise ManifestError(f"corpus directory {corpus_dir} does not exist")
    wavs = sorted(corpus_dir.glob("*/*.wav"))
    if not wavs:
        raise ManifestError(f"no <speaker>/<utterance>.wav files under {corpus_dir}")

    utts, problems = [], []
    for wav in wavs:
        speaker = wav.parent.name
        try:
            w = load_wav(wav, resample=resample)
        except AudioFormatError as e:
            problems.append(str(e))
            continue
        utts.append(
            Utterance(
                utterance_id=f"{speaker}_{wav.stem}",
                speaker_id=speaker,
                path=wav.resolve(),
                duration_s=round(w.duration_s, 4),
            )
        )
    if problems:
        raise ManifestError(
            f"{len(problems)} non-conforming audio file(s):\n  " + "\n  ".join(problems)
        )
    manifest = Manifest(utts)
    if out_path is not None:
        manifest.write(out_path)
    return manifest
