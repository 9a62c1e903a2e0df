"""Task descriptions: role templates, paraphrase expansion, placeholder filling."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .errors import ExpansionError, TemplateError
from .gateway import Gateway, strip_thinking

log = logging.getLogger(__name__)

PLACEHOLDERS = frozenset({"feature_names", "target_name", "expert_info"})
_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
PARAPHRASE_ASSET = "paraphrase_v1.txt"

# Graded descriptions of the synthetic task, least to most informative.
SYNTHETIC_PRESETS = {
    "linear": "The target is linear in features",
    "one_feature": (
        "The target is a linear combination of the features and that when 'feature 0' "
        "increases by 1, the target increases by 2"
    ),
    "two_features": (
        "The target is a linear combination of the features and that when 'feature 0' "
        "increases by 1, the target increases by 2, and when 'feature 1' increases by 1, "
        "the target decreases by 1"
    ),
    "three_features": (
        "The target is a linear combination of the features and that when 'feature 0' "
        "increases by 1, the target increases by 2, and when 'feature 1' increases by 1, "
        "the target decreases by 1, and when 'feature 2' increases by 1, the target increases by 1"
    ),
    "full_equation": "The 'target' = 2 * 'feature 0' - 1 * 'feature 1' + 1 * 'feature 2'",
}


def placeholders_in(text: str) -> set[str]:
    return set(_PLACEHOLDER.findall(text))


@dataclass(frozen=True)
class RoleText:
    kind: Literal["system", "user"]
    template: str

    def __post_init__(self):
        if self.kind not in ("system", "user"):
            raise TemplateError(f"role kind must be system or user, got {self.kind!r}")
        if not self.template.strip():
            raise TemplateError("role template is empty")
        unknown = placeholders_in(self.template) - PLACEHOLDERS
        if unknown:
            raise TemplateError(f"unknown placeholders {sorted(unknown)}")


@dataclass(frozen=True)
class TaskDescription:
    system: str
    user: str
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        left = placeholders_in(self.system) | placeholders_in(self.user)
        if left & PLACEHOLDERS:
            raise TemplateError(f"unresolved placeholders {sorted(left & PLACEHOLDERS)}")


@dataclass(frozen=True)
class DescriptionTemplate:
    system: RoleText
    user: RoleText
    origin: tuple[int, int] = (0, 0)


def read_asset(name: str) -> str:
    return (resources.files("elicitkit") / "assets" / name).read_text(encoding="utf-8")


def load_roles(directory: str | Path, kind: Literal["system", "user"]) -> list[RoleText]:
    """Read ``<kind>_<index>.txt`` files in index order."""
    directory = Path(directory)
    found = []
    for path in directory.glob(f"{kind}_*.txt"):
        suffix = path.stem[len(kind) + 1:]
        if suffix.isdigit():
            found.append((int(suffix), path))
    if not found:
        raise TemplateError(f"no {kind}_<index>.txt files in {directory}")
    return [RoleText(kind, p.read_text(encoding="utf-8").strip()) for _, p in sorted(found)]


def save_roles(roles: Sequence[RoleText], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, role in enumerate(roles):
        (directory / f"{role.kind}_{i}.txt").write_text(role.template, encoding="utf-8")


def builtin_roles(dataset: str, kind: Literal["system", "user"]) -> list[RoleText]:
    with resources.as_file(resources.files("elicitkit") / "assets" / dataset) as path:
        return load_roles(path, kind)


def expand_role(base: RoleText, n_variants: int, llm: Gateway, retry_limit: int = 3) -> list[RoleText]:
    """Base role plus ``n_variants - 1`` LLM paraphrases keeping every placeholder."""
    if n_variants < 1:
        raise ValueError("n_variants must be at least 1")
    required = placeholders_in(base.template)
    instruction = read_asset(PARAPHRASE_ASSET)
    variants = [base]
    for index in range(1, n_variants):
        # str.replace, not format: the instruction itself mentions {feature_names}
        prompt = instruction.replace("{index}", str(index)).replace("{text}", base.template)
        request = llm.request(None, prompt)
        for attempt in range(retry_limit + 1):
            if attempt:
                request = request.with_message(
                    "user",
                    f"Attempt {attempt + 1}: your rephrasing lost the placeholder tokens "
                    f"{sorted(missing)}. Keep every placeholder exactly as written.",
                )
            text = strip_thinking(llm.complete(request)).strip()
            found = placeholders_in(text)
            missing = required - found
            if not missing and found <= PLACEHOLDERS and text:
                variants.append(RoleText(base.kind, text))
                break
            missing = missing | (found - PLACEHOLDERS)
            log.info("paraphrase %d rejected, placeholder problems %s", index, sorted(missing))
        else:
            raise ExpansionError(f"paraphrase {index} of the {base.kind} role kept failing placeholder checks")
    return variants


def cartesian(systems: Sequence[RoleText], users: Sequence[RoleText]) -> list[DescriptionTemplate]:
    if not systems or not users:
        raise ValueError("need at least one system and one user role")
    return [
        DescriptionTemplate(s, u, (i, j))
        for i, s in enumerate(systems)
        for j, u in enumerate(users)
    ]


def render_feature_list(feature_names: Iterable[str]) -> str:
    return str([str(n) for n in feature_names])


def _substitute(template: str, values: dict[str, str]) -> str:
    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise TemplateError(f"unknown placeholder {{{name}}}")
        return values[name]

    out = _PLACEHOLDER.sub(sub, template)
    return re.sub(r"[ \t]{2,}", " ", out).strip()


def fill(
    description: DescriptionTemplate | TaskDescription,
    feature_names: Sequence[str],
    target_name: str,
    expert_info: str | None = None,
) -> TaskDescription:
    if isinstance(description, TaskDescription):
        system, user, origin = description.system, description.user, description.origin
    else:
        system, user, origin = description.system.template, description.user.template, description.origin
    values = {
        "feature_names": render_feature_list(feature_names),
        "target_name": str(target_name),
        "expert_info": (expert_info or "").strip(),
    }
    out = TaskDescription(_substitute(system, values), _substitute(user, values), origin)
    text = out.system + "\n" + out.user
    missing = [n for n in feature_names if n not in text]
    if missing:
        raise TemplateError(f"description never mentions features {missing}")
    return out


def build_descriptions(
    systems: Sequence[RoleText],
    users: Sequence[RoleText],
    feature_names: Sequence[str],
    target_name: str,
    expert_info: str | None = None,
) -> list[TaskDescription]:
    return [fill(t, feature_names, target_name, expert_info) for t in cartesian(systems, users)]


def select_descriptions(descriptions: Sequence[TaskDescription], k: int) -> list[TaskDescription]:
    """Pick ``k`` descriptions; a perfect square k = m*m takes the m-by-m origin sub-grid."""
    if k < 1 or k > len(descriptions):
        raise ValueError(f"cannot select {k} of {len(descriptions)} descriptions")
    m = int(round(k ** 0.5))
    if m * m == k:
        grid = [d for d in descriptions if d.origin[0] < m and d.origin[1] < m]
        if len(grid) == k:
            return grid
    return list(descriptions[:k])
