from __future__ import annotations

import copy
import json

import pytest

from omgs.case_schema import DocType
from omgs.role_scoping import (
    DEFAULT_ACCESS_MATRIX,
    DEFAULT_MATRIX_CONFIG,
    AccessConfigError,
    Role,
    build_all_packages,
    build_role_package,
    export_default_matrix,
    load_access_matrix,
    project_case,
)


def test_default_matrix_is_total():
    assert set(DEFAULT_ACCESS_MATRIX.roles) == set(Role)


@pytest.mark.parametrize(
    "mutate, msg",
    [
        (lambda c: c["roles"].pop("Radiologist"), "not total"),
        (lambda c: c["roles"].__setitem__("Surgeon", c["roles"]["Chair"]), "unknown role"),
        (lambda c: c["roles"]["Pathologist"]["documents"].append({"doc_type": "Xray"}), "doc_type"),
        (lambda c: c["roles"]["Pathologist"].__setitem__("fields", []), "nonempty"),
        (lambda c: c["roles"]["Pathologist"]["fields"].append("ssn"), "unknown field"),
        (lambda c: c["roles"]["Chair"].__setitem__("query_template", "nope"), "query template"),
    ],
)
def test_invalid_matrices_are_rejected(mutate, msg):
    cfg = copy.deepcopy(DEFAULT_MATRIX_CONFIG)
    mutate(cfg)
    with pytest.raises(AccessConfigError, match=msg):
        load_access_matrix(cfg)


def test_export_and_reload(tmp_path):
    export_default_matrix(tmp_path / "m.json")
    m = load_access_matrix(tmp_path / "m.json")
    assert m.to_dict() == DEFAULT_ACCESS_MATRIX.to_dict()


def test_packages_respect_document_rules(cases, snapshot):
    for case in cases:
        for role, pkg in build_all_packages(case, DEFAULT_ACCESS_MATRIX, snapshot).items():
            access = DEFAULT_ACCESS_MATRIX[role]
            assert all(access.admits(d) for d in pkg.documents)
            admitted = [d.doc_id for d in case.documents if access.admits(d)]
            assert [d.doc_id for d in pkg.documents] == admitted


def test_chair_sees_index_but_no_bodies(case_by_id, snapshot):
    pkg = build_role_package(case_by_id["OV-002"], Role.CHAIR, DEFAULT_ACCESS_MATRIX, snapshot)
    assert pkg.documents == ()
    assert "document_index" in pkg.case_projection
    assert all("body" not in d for d in pkg.case_projection["document_index"])


def test_nuclear_medicine_sees_only_nuclear_imaging(case_by_id, snapshot):
    case = case_by_id["OV-002"]
    pkg = build_role_package(case, Role.NUCLEAR_MEDICINE, DEFAULT_ACCESS_MATRIX, snapshot)
    imaging = [d for d in pkg.documents if d.doc_type is DocType.IMAGING]
    assert [d.doc_id for d in imaging] == ["OV-002-PET"]
    assert set(pkg.case_projection["biomarkers"]) <= {"CA-125", "HE4"}


def test_projection_drops_unlisted_fields(case_by_id):
    proj = project_case(case_by_id["OV-013"], ["histology_group"])
    assert set(proj) == {"case_id", "index_mdt_date", "histology_group"}


def test_package_serialization_is_deterministic(case_by_id, snapshot):
    case = case_by_id["OV-010"]
    a = build_role_package(case, Role.ONCOLOGIST, DEFAULT_ACCESS_MATRIX, snapshot).serialize()
    b = build_role_package(case, Role.ONCOLOGIST, DEFAULT_ACCESS_MATRIX, snapshot).serialize()
    assert a == b
    body = json.loads(a)
    assert body["snapshot_id"] == snapshot.snapshot_id
    assert len(body["evidence"]) == 10


def test_packages_do_not_leak_other_roles_document_bodies(cases, snapshot):
    for case in cases:
        for role, pkg in build_all_packages(case, DEFAULT_ACCESS_MATRIX, snapshot).items():
            text = pkg.serialize().decode()
            for d in case.documents:
                if not DEFAULT_ACCESS_MATRIX[role].admits(d):
                    assert json.dumps(d.body)[1:-1] not in text
