import difflib
from typing import Callable

GREEN = "\033[32m"
RED = "\033[31m"
CYAN = "\033[36m"
RESET = "\033[0m"


def detect_indentation(content: str, default: int = 2) -> int:
    """Width of the first indented line of a JSON document; tabs count as one."""
    for line in content.splitlines():
        stripped = line.lstrip(" \t")
        if stripped and len(stripped) < len(line):
            return len(line) - len(stripped)
    return default


def show_diff_and_confirm(
    old_content: str,
    new_content: str,
    file_path: str,
    input_fn: Callable[[str], str] = input,
    print_fn: Callable[..., None] = print,
) -> str:
    """Print a colored unified diff and ask before overwriting `file_path`.

    Returns 'unchanged', 'apply' or 'cancel'.
    """
    diff = list(
        difflib.unified_diff(
            old_content.splitlines(keepends=True),
            new_content.splitlines(keepends=True),
            fromfile=f"{file_path} (current)",
            tofile=f"{file_path} (reference)",
        )
    )
    if not diff:
        print_fn("No changes detected.")
        return "unchanged"

    print_fn(f"\nDiff preview for: {file_path}\n")
    for line in diff:
        if not line.endswith("\n"):
            line += "\n"
        if line.startswith(("+++", "---")):
            print_fn(line, end="")
        elif line.startswith("@@"):
            print_fn(f"{CYAN}{line}{RESET}", end="")
        elif line.startswith("+"):
            print_fn(f"{GREEN}{line}{RESET}", end="")
        elif line.startswith("-"):
            print_fn(f"{RED}{line}{RESET}", end="")
        else:
            print_fn(line, end="")
    print_fn("")

    response = input_fn("\nOverwrite with these changes? [y/N]: ").strip().lower()
    return "apply" if response in ("y", "yes") else "cancel"


def derive_seeds(seed: int, count: int) -> list[int]:
    """Per-file seeds seed, seed+1, ... for a batch of generated trajectories."""
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    return [seed + i for i in range(count)]
