import importlib
import pkgutil
import sys
import traceback
from types import ModuleType
from typing import List


def import_submodules(package: ModuleType) -> List[str]:
    """
    Imports every submodule of a package, recursively, and returns their names.
    Exits with status 1 on the first module that fails to import, naming the
    file and statement where the failure happened.
    """
    imported = []
    for info in pkgutil.walk_packages(package.__path__, prefix=package.__name__ + "."):
        try:
            importlib.import_module(info.name)
        except Exception as e:  # pylint: disable = broad-except
            filename, line_number, _, text = traceback.extract_tb(e.__traceback__)[-1]
            kind = type(e).__name__
            sys.stderr.write(
                f"{kind} while importing {info.name}, in file: {filename} "
                f"at line: {line_number}, statement: {text}\n"
            )
            sys.exit(1)
        imported.append(info.name)
    return imported


if __name__ == "__main__":
    import penseg

    names = import_submodules(penseg)
    print(f"All {len(names)} submodules imported successfully!")
