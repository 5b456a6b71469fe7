"""Patient communication noise: six pillars, five severity levels each.

Profiles pair pillars with levels and drive the patient generator's
behaviour through a rendered ``[NOISE PROFILE]`` prompt block.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

MIN_LEVEL = 0
MAX_LEVEL = 4
PROTOCOL_LEVELS = (1, 2, 3)
PROTOCOL_PILLAR_COUNT = 2


class NoisePillar(str, Enum):
    MEMORY_RECALL = "memory_recall"
    HEALTH_LITERACY = "health_literacy"
    EMOTIONAL_STATE = "emotional_state"
    COMMUNICATION_STYLE = "communication_style"
    SOCIAL_CULTURAL = "social_cultural"
    COGNITIVE_PROCESSING = "cognitive_processing"

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]


_DISPLAY_NAMES = {
    NoisePillar.MEMORY_RECALL: "Memory & Recall",
    NoisePillar.HEALTH_LITERACY: "Health Literacy",
    NoisePillar.EMOTIONAL_STATE: "Emotional State",
    NoisePillar.COMMUNICATION_STYLE: "Communication Style",
    NoisePillar.SOCIAL_CULTURAL: "Social-Cultural",
    NoisePillar.COGNITIVE_PROCESSING: "Cognitive Processing",
}

# Behavioural prompt text per pillar, indexed by level 0..4.
BEHAVIORS: dict[NoisePillar, tuple[str, str, str, str, str]] = {
    NoisePillar.MEMORY_RECALL: (
        "You remember everything accurately with exact dates and times. "
        "When asked about symptom onset, provide precise information.",
        "You occasionally forget minor details. "
        "You are slightly uncertain about exact timing but can approximate within a day or two.",
        "You often forget details and are vague about dates. "
        'Use phrases like "maybe a few weeks ago" or "sometime last month."',
        "You have major memory gaps with a confused timeline. "
        "You may mix up the order of events or combine separate episodes.",
        "You forget most things and are completely disoriented about time. "
        "You cannot reliably sequence events or estimate durations.",
    ),
    NoisePillar.HEALTH_LITERACY: (
        "Use correct medical terminology and precise anatomical descriptions. "
        'Say "epigastric pain" not "stomach ache."',
        "Use mostly accurate descriptions with occasional medical terms. "
        "You understand basic anatomy and can follow medical explanations.",
        "Use common words only. "
        'Say "stomach" for any abdominal area, "sugar" for diabetes. Struggle with medical jargon.',
        "Use very basic words, point vaguely to body areas. "
        "Struggle with numbers and cannot describe severity precisely.",
        "Cannot describe locations clearly. No numerical concepts for duration or intensity. "
        "May use gestures or metaphors instead of words.",
    ),
    NoisePillar.EMOTIONAL_STATE: (
        "Report symptoms calmly and objectively without emotional coloring. "
        'Describe pain as "mild discomfort" if appropriate.',
        "Show slight worry. Occasionally emphasize symptoms mildly. "
        "Express concern about what symptoms might mean.",
        "Clearly worried. Tend to assume symptoms mean something serious. "
        'Use words like "worried" or "concerned" frequently.',
        "Very anxious with catastrophic thinking. Significantly amplify all symptoms. "
        "Jump to worst-case scenarios.",
        "Extreme panic. Convinced something terrible is happening. "
        'Use phrases like "I\'m dying" or "This is the worst pain ever."',
    ),
    NoisePillar.COMMUNICATION_STYLE: (
        "Give direct, relevant answers with appropriate level of detail. "
        "Stay focused on the question asked.",
        "Provide extra context and stories. "
        "Occasionally go slightly off-topic but return to the main point.",
        "Give long-winded responses. "
        "Bury important information in tangential stories about family or work.",
        "Very difficult to get direct answers. "
        "Constantly change subject. Require multiple redirections to stay on topic.",
        "Extremely disorganized speech. Cannot maintain topic. "
        "Give incomplete answers and jump between unrelated subjects.",
    ),
    NoisePillar.SOCIAL_CULTURAL: (
        "Share all information openly without any hesitation. "
        "Disclose sensitive information (alcohol, drugs, sexual history) immediately.",
        "Usually open. Minor hesitation only on very sensitive topics. "
        "Will share after brief pause or gentle probing.",
        "Selective disclosure. Avoid topics you find embarrassing. "
        "Minimize frequency or severity of stigmatized behaviors.",
        "Share minimal information. Initially deny stigmatized behaviors (alcohol, drugs, etc.). "
        "Only admit after empathetic probing.",
        "Extreme reluctance to share. May provide false information to hide truth. "
        "Require extensive rapport-building before disclosure.",
    ),
    NoisePillar.COGNITIVE_PROCESSING: (
        "Consider all possibilities equally. Open to any diagnosis. "
        "Do not mention internet research or preconceived notions.",
        "Slight preference for your own beliefs. "
        "Mention internet research casually. Accept alternative explanations readily.",
        "Convinced of a specific diagnosis from Google. "
        "Mention it frequently. Still willing to consider alternatives if explained.",
        "Strongly insist on your self-diagnosis. "
        "Dismiss contradicting information. Request specific tests you read about online.",
        "Completely fixed belief. "
        "Reject all alternative explanations aggressively. "
        "Accuse doctor of incompetence if they disagree.",
    ),
}


class NoiseLevelError(ValueError):
    """Severity level outside 0..4."""


def _check_level(level: int) -> int:
    if isinstance(level, bool) or not isinstance(level, int):
        raise NoiseLevelError(f"noise level must be an integer, got {level!r}")
    if not MIN_LEVEL <= level <= MAX_LEVEL:
        raise NoiseLevelError(f"noise level {level} outside {MIN_LEVEL}..{MAX_LEVEL}")
    return level


def behavior_text(pillar: NoisePillar | str, level: int) -> str:
    """Return the behavioural instruction for ``pillar`` at ``level``."""
    return BEHAVIORS[NoisePillar(pillar)][_check_level(level)]


@dataclass(frozen=True)
class NoiseSpec:
    pillar: NoisePillar
    level: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "pillar", NoisePillar(self.pillar))
        _check_level(self.level)

    def to_dict(self) -> dict:
        return {"type": self.pillar.value, "level": self.level}


@dataclass(frozen=True)
class NoiseProfile:
    """Ordered pillar/level pairs. An empty profile is the clean patient."""

    specs: tuple[NoiseSpec, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "specs", tuple(self.specs))

    @classmethod
    def of(cls, *pairs: tuple[NoisePillar | str, int]) -> NoiseProfile:
        return cls(tuple(NoiseSpec(NoisePillar(p), lvl) for p, lvl in pairs))

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> NoiseProfile:
        return cls(tuple(NoiseSpec(NoisePillar(it["type"]), it["level"]) for it in items))

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.specs]

    @property
    def is_clean(self) -> bool:
        return not self.specs

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)


CLEAN_PROFILE = NoiseProfile()


class ProfileMode(str, Enum):
    STANDARD = "standard"
    ABLATION = "ablation"


@dataclass(frozen=True)
class Violation:
    code: str  # duplicate_pillar | level_out_of_protocol | count_mismatch
    detail: str


def validate_profile(
    profile: NoiseProfile, mode: ProfileMode | str = ProfileMode.STANDARD
) -> list[Violation]:
    """Check a profile against the experimental protocol.

    Standard runs need exactly two distinct pillars at levels 1-3. Ablation
    runs accept zero to six distinct pillars at any level 0-4. An empty list
    means the profile is acceptable.
    """
    mode = ProfileMode(mode)
    violations: list[Violation] = []
    seen: set[NoisePillar] = set()
    for spec in profile.specs:
        if spec.pillar in seen:
            violations.append(Violation("duplicate_pillar", spec.pillar.value))
        seen.add(spec.pillar)

    if mode is ProfileMode.STANDARD:
        if len(profile.specs) != PROTOCOL_PILLAR_COUNT:
            violations.append(
                Violation(
                    "count_mismatch",
                    f"expected {PROTOCOL_PILLAR_COUNT} specs, got {len(profile.specs)}",
                )
            )
        for spec in profile.specs:
            if spec.level not in PROTOCOL_LEVELS:
                violations.append(
                    Violation("level_out_of_protocol", f"{spec.pillar.value}={spec.level}")
                )
    elif len(profile.specs) > len(NoisePillar):
        violations.append(
            Violation("count_mismatch", f"at most {len(NoisePillar)} specs allowed")
        )
    return violations


def sample_profile(seed: int, mode: ProfileMode | str = ProfileMode.STANDARD) -> NoiseProfile:
    """Draw a protocol profile deterministically from ``seed``.

    Two pillars uniformly without replacement, each with a level uniform
    over 1-3.
    """
    if ProfileMode(mode) is not ProfileMode.STANDARD:
        raise ValueError("sample_profile only supports standard mode")
    rng = random.Random(seed)
    pillars = rng.sample(list(NoisePillar), PROTOCOL_PILLAR_COUNT)
    return NoiseProfile(tuple(NoiseSpec(p, rng.choice(PROTOCOL_LEVELS)) for p in pillars))


def render_profile_block(profile: NoiseProfile) -> str:
    specs = profile.specs or tuple(NoiseSpec(p, 0) for p in NoisePillar)
    lines = ["[NOISE PROFILE]", "Apply the following communication barriers naturally:"]
    for spec in specs:
        lines.append(
            f"- {spec.pillar.display_name} (Level {spec.level}): "
            f"{behavior_text(spec.pillar, spec.level)}"
        )
    return "\n".join(lines)


def describe_profile(profile: NoiseProfile) -> str:
    """One-line human summary, e.g. ``Health Literacy L3 + Emotional State L2``."""
    if profile.is_clean:
        return "Clean (all pillars Level 0)"
    return " + ".join(f"{s.pillar.display_name} L{s.level}" for s in profile.specs)
