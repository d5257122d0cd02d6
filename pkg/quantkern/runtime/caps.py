"""
Device capability record shared by the kernel library and the runtime.
"""
from dataclasses import dataclass, replace
from typing import Any, Dict


@dataclass(frozen=True)
class DeviceCaps:
    """
    Negotiated device capabilities, populated once at device init.

    Attributes:
        adapter_name: Human-readable adapter description
        backend: ``wgpu`` or ``host``
        max_workgroup_size: Max invocations per workgroup
        max_workgroup_size_x: Max workgroup extent along x
        shared_memory_bytes: Workgroup storage limit
        subgroups: Subgroup operations enabled on the device
        subgroup_min_size: Smallest subgroup size the adapter reports
        subgroup_max_size: Largest subgroup size the adapter reports
        f16: shader-f16 enabled
        timestamps: Timestamp queries enabled
        sg_matrix: Subgroup-matrix operations enabled
        max_buffer_size: Largest single buffer
        max_storage_binding_size: Largest storage buffer binding
        uniform_offset_alignment: Required alignment of dynamic uniform offsets
        storage_offset_alignment: Required alignment of storage binding offsets
        max_workgroups_per_dim: Max dispatch extent per dimension
        validation: Device created with validation mode on
    """

    adapter_name: str = 'host'
    backend: str = 'host'
    max_workgroup_size: int = 256
    max_workgroup_size_x: int = 256
    shared_memory_bytes: int = 32768
    subgroups: bool = False
    subgroup_min_size: int = 0
    subgroup_max_size: int = 0
    f16: bool = False
    timestamps: bool = False
    sg_matrix: bool = False
    max_buffer_size: int = 1 << 30
    max_storage_binding_size: int = 1 << 30
    uniform_offset_alignment: int = 256
    storage_offset_alignment: int = 256
    max_workgroups_per_dim: int = 65535
    validation: bool = False

    def portable(self) -> 'DeviceCaps':
        """Same device with subgroup variants switched off (A/B testing)."""
        return replace(self, subgroups=False, subgroup_min_size=0, subgroup_max_size=0, sg_matrix=False)

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)
