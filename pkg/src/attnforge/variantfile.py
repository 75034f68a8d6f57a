"""Variant definition files: a JSON document with expression-string
leaves describing one attention variant.

Field layout (see docs/variant-files.md for the full reference):

    name      string
    pattern   "parallel" | "recurrent"
    dims      {batch, heads, seq_q, seq_k, dqk, dv}
    q_mod / k_mod / v_mod / score_mod / output_mod / h_mod
              expression strings (each optional)
    rownorm   {"direct": expr} or
              {"online": {rowscales: [names],
                          prologue: {name: expr},
                          fwd: {name: expr, ..., scores: expr, rescale: expr},
                          epilogue: expr}}
    masks     [{expr, ismask: true}, ...]   appended after score_mod
    extras    [{name, shape, fill?, fill_params?, differentiable?}, ...]

All user math stays in the expression language; the file format adds no
nested structure beyond naming the template hook each string fills.
Loader errors carry the offending field path so a malformed file names
what is missing or mistyped.
"""

from __future__ import annotations

import json

from .attention import (AttentionSpec, DirectRowNorm, Dims, ExtraInput,
                        ModificationFn, Pattern, online)
from .errors import ForgeError, SchemaError

_DIM_KEYS = ("batch", "heads", "seq_q", "seq_k", "dqk", "dv")
_MOD_VARS = {"q_mod": "q", "k_mod": "k", "v_mod": "v", "score_mod": "s",
             "output_mod": "o", "h_mod": "h"}
_SHAPE_TOKENS = {"batch", "heads", "seq_q", "seq_k", "d_qk", "d_v"}
_FILLS = {"uniform", "unit", "constant_decay", "causal_decay_mask",
          "index_q", "index_k"}
_TOP_KEYS = {"name", "pattern", "dims", "rownorm", "masks", "extras",
             "notes"} | set(_MOD_VARS)


def _expect(doc: dict, key: str, types, where: str, required: bool = True):
    if key not in doc:
        if required:
            raise SchemaError(f"variant file missing field {where}.{key}")
        return None
    v = doc[key]
    if not isinstance(v, types) or isinstance(v, bool):
        raise SchemaError(f"variant field {where}.{key} has wrong type",
                          want=getattr(types, "__name__", str(types)),
                          got=type(v).__name__)
    return v


def _fragment(source: str, var: str | None, where: str,
              ismask: bool = False, allow_reduce: bool = False):
    try:
        return ModificationFn(source, var, ismask=ismask,
                              allow_reduce=allow_reduce)
    except ForgeError as e:
        raise SchemaError(f"variant field {where} does not parse",
                          detail=e.message, **e.context)


def spec_from_dict(doc) -> AttentionSpec:
    """Build and validate an AttentionSpec from a parsed variant file."""
    if not isinstance(doc, dict):
        raise SchemaError("variant file must be a JSON object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise SchemaError("variant file has unknown fields", fields=unknown)

    name = _expect(doc, "name", str, "$")
    pattern_s = _expect(doc, "pattern", str, "$")
    if pattern_s not in ("parallel", "recurrent"):
        raise SchemaError("variant field $.pattern must be "
                          "'parallel' or 'recurrent'", got=pattern_s)
    pattern = Pattern.PARALLEL if pattern_s == "parallel" \
        else Pattern.RECURRENT

    dims_doc = _expect(doc, "dims", dict, "$")
    vals = {key: _expect(dims_doc, key, int, "dims") for key in _DIM_KEYS}
    dims = Dims(vals["batch"], vals["heads"], vals["seq_q"], vals["seq_k"],
                vals["dqk"], vals["dv"])

    mods = {}
    for field, var in _MOD_VARS.items():
        src = _expect(doc, field, str, "$", required=False)
        mods[field] = None if src is None else _fragment(src, var, field)

    score_mods = []
    if mods["score_mod"] is not None:
        score_mods.append(mods["score_mod"])
    masks = _expect(doc, "masks", list, "$", required=False) or []
    for i, entry in enumerate(masks):
        if not isinstance(entry, dict):
            raise SchemaError(f"variant field masks[{i}] must be an object")
        expr = _expect(entry, "expr", str, f"masks[{i}]")
        flag = entry.get("ismask")
        if flag is not True:
            raise SchemaError(f"variant field masks[{i}].ismask must be "
                              "true", got=repr(flag))
        extra_keys = sorted(set(entry) - {"expr", "ismask"})
        if extra_keys:
            raise SchemaError(f"variant field masks[{i}] has unknown "
                              "fields", fields=extra_keys)
        score_mods.append(_fragment(expr, "s", f"masks[{i}]", ismask=True))

    rownorm = None
    rn_doc = _expect(doc, "rownorm", dict, "$", required=False)
    if rn_doc is not None:
        rownorm = _rownorm_from_dict(rn_doc)

    extras = []
    extras_doc = _expect(doc, "extras", list, "$", required=False) or []
    for i, entry in enumerate(extras_doc):
        extras.append(_extra_from_dict(entry, i))

    spec = AttentionSpec(
        name=name, pattern=pattern, dims=dims,
        q_mod=mods["q_mod"], k_mod=mods["k_mod"], v_mod=mods["v_mod"],
        score_mods=tuple(score_mods), rownorm=rownorm,
        output_mod=mods["output_mod"], h_mod=mods["h_mod"],
        extra_inputs=tuple(extras))
    spec.validate()
    return spec


def _rownorm_from_dict(rn_doc: dict):
    keys = set(rn_doc)
    if keys == {"direct"}:
        src = _expect(rn_doc, "direct", str, "rownorm")
        body = _fragment(src, "s", "rownorm.direct", allow_reduce=True)
        return DirectRowNorm(body)
    if keys == {"online"}:
        on = _expect(rn_doc, "online", dict, "rownorm")
        rowscales = _expect(on, "rowscales", list, "rownorm.online")
        for rs in rowscales:
            if not isinstance(rs, str):
                raise SchemaError("rownorm.online.rowscales entries must "
                                  "be strings", got=type(rs).__name__)
        prologue = _expect(on, "prologue", dict, "rownorm.online")
        fwd = _expect(on, "fwd", dict, "rownorm.online")
        epilogue = _expect(on, "epilogue", str, "rownorm.online")
        for part, obj in (("prologue", prologue), ("fwd", fwd)):
            for k, v in obj.items():
                if not isinstance(v, str):
                    raise SchemaError(
                        f"variant field rownorm.online.{part}.{k} must "
                        "be an expression string", got=type(v).__name__)
        extra_on = sorted(set(on) - {"rowscales", "prologue", "fwd",
                                     "epilogue"})
        if extra_on:
            raise SchemaError("rownorm.online has unknown fields",
                              fields=extra_on)
        try:
            return online(list(rowscales), dict(prologue), dict(fwd),
                          epilogue)
        except ForgeError as e:
            raise SchemaError("rownorm.online does not parse",
                              detail=e.message, **e.context)
    raise SchemaError("variant field $.rownorm must have exactly one of "
                      "the keys 'direct' or 'online'", got=sorted(keys))


def _extra_from_dict(entry, i: int) -> ExtraInput:
    where = f"extras[{i}]"
    if not isinstance(entry, dict):
        raise SchemaError(f"variant field {where} must be an object")
    unknown = sorted(set(entry) - {"name", "shape", "fill", "fill_params",
                                   "differentiable"})
    if unknown:
        raise SchemaError(f"variant field {where} has unknown fields",
                          fields=unknown)
    name = _expect(entry, "name", str, where)
    shape_doc = _expect(entry, "shape", list, where)
    if len(shape_doc) != 4:
        raise SchemaError(f"variant field {where}.shape must have 4 "
                          "entries", got=len(shape_doc))
    shape = []
    for tok in shape_doc:
        if tok == 1:
            shape.append(1)
        elif isinstance(tok, str) and tok in _SHAPE_TOKENS:
            shape.append(tok)
        else:
            raise SchemaError(f"variant field {where}.shape has a bad "
                              "token", token=repr(tok),
                              want=sorted(_SHAPE_TOKENS) + [1])
    fill = entry.get("fill", "uniform")
    if fill not in _FILLS:
        raise SchemaError(f"variant field {where}.fill is unknown",
                          got=fill, want=sorted(_FILLS))
    params = entry.get("fill_params", {})
    if not isinstance(params, dict):
        raise SchemaError(f"variant field {where}.fill_params must be an "
                          "object", got=type(params).__name__)
    diff = entry.get("differentiable", True)
    if not isinstance(diff, bool):
        raise SchemaError(f"variant field {where}.differentiable must be "
                          "a boolean", got=type(diff).__name__)
    return ExtraInput(name=name, shape=tuple(shape), fill=fill,
                      fill_params=dict(params), differentiable=diff)


def spec_from_text(text: str, source: str = "<variant>") -> AttentionSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("variant file is not valid JSON", source=source,
                          detail=str(e))
    try:
        return spec_from_dict(doc)
    except SchemaError as e:
        e.context.setdefault("source", source)
        raise


def load_variant(path: str) -> AttentionSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise SchemaError("variant file not found", path=path)
    return spec_from_text(text, source=path)
