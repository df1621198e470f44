"""
    Datasets on disk: a directory of `<name>.ome.tif` stacks, each with a
    `<name>.json` annotation file.
"""

import os
from typing import List, Sequence, Tuple, Union

from penseg.annotations import AnnotationSet, load_annotations, save_annotations
from penseg.stacks import ImageStack, load_stack, save_stack

Dataset = List[Tuple[ImageStack, AnnotationSet]]

STACK_SUFFIX = ".ome.tif"
ANNOTATION_SUFFIX = ".json"


def dataset_names(directory: Union[str, "os.PathLike[str]"]) -> List[str]:
    """
    Sorted names of the stacks in a dataset directory.
    """
    directory = os.fspath(directory)
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"No such dataset directory: {directory}")
    return sorted(
        entry[: -len(STACK_SUFFIX)]
        for entry in os.listdir(directory)
        if entry.endswith(STACK_SUFFIX)
    )


def load_dataset(directory: Union[str, "os.PathLike[str]"]) -> Dataset:
    """
    Loads all stack/annotation pairs of a directory, in name order.
    """
    directory = os.fspath(directory)
    dataset = []
    for name in dataset_names(directory):
        stack = load_stack(os.path.join(directory, name + STACK_SUFFIX))
        annotations = load_annotations(
            os.path.join(directory, name + ANNOTATION_SUFFIX), stack.shape
        )
        dataset.append((stack, annotations))
    if not dataset:
        raise FileNotFoundError(f"No '*{STACK_SUFFIX}' stacks found in {directory}.")
    return dataset


def save_dataset(
    dataset: Sequence[Tuple[ImageStack, AnnotationSet]],
    directory: Union[str, "os.PathLike[str]"],
    prefix: str = "stack",
) -> List[str]:
    """
    Writes stack/annotation pairs as `<prefix>_<index>` files, creating
    the directory if needed. Returns the names written.
    """
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    width = max(3, len(str(len(dataset) - 1)))
    names = []
    for idx, (stack, annotations) in enumerate(dataset):
        name = f"{prefix}_{idx:0{width}d}"
        save_stack(stack, os.path.join(directory, name + STACK_SUFFIX))
        save_annotations(annotations, os.path.join(directory, name + ANNOTATION_SUFFIX))
        names.append(name)
    return names
