"""Textual DSL for shade trees: recursive-descent parser and canonical printer.

Grammar (keyword arguments may appear in any order):

    tree      := "Mix" "(" tree "," tree "," mask ")"
               | "Multiply" "(" tree "," tree ")"
               | "Screen" "(" tree "," tree ")"
               | leaf
    leaf      := "Albedo"    "(" color=vec3 ")"
               | "DiffRef"   "(" lobe=vec3 "," ambient=num ["," bands=int] ")"
               | "Highlight" "(" lobe=vec3 "," sharpness=num ["," bands=int] ")"
               | "EnvRef"    "(" (index=int | path=string) ["," rotation=num] ")"
    mask      := "HalfSpace" "(" dir=vec3 "," t=num ["," softness=num]
                                 ["," binarize=bool] ")"
               | "Raster"    "(" w=int "," h=int "," data=string ")"
    vec3      := "[" num "," num "," num "]"

Numbers print with 6 significant digits; print(parse(text)) is canonical and
parse(print(tree)) is the identity for trees whose parameters are already
quantized at that precision (everything this package produces).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ArityError, DslSyntaxError, ParamRangeError
from .tree import (AlbedoParams, DiffRefParams, EnvRefParams, HalfSpaceMask,
                   HighlightParams, Interior, Leaf, LeafFamily, MaskSpec, OpKind,
                   RasterMask, ShadeTree)

__all__ = ["parse_tree", "print_tree", "format_number"]


def format_number(x: float) -> str:
    if isinstance(x, float) and x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return f"{float(x):.6g}"


def _fmt_vec(v) -> str:
    return "[" + ",".join(format_number(c) for c in v) + "]"


def print_mask(mask: MaskSpec) -> str:
    if isinstance(mask, HalfSpaceMask):
        parts = [f"dir={_fmt_vec(mask.direction)}", f"t={format_number(mask.threshold)}"]
        if mask.softness != 0.0:
            parts.append(f"softness={format_number(mask.softness)}")
        if not mask.binarize:
            parts.append("binarize=false")
        return f"HalfSpace({', '.join(parts)})"
    h, w = mask.shape
    return f'Raster(w={w}, h={h}, data="{mask.encode()}")'


def print_tree(tree: ShadeTree) -> str:
    """Canonical DSL text; deterministic and round-trippable."""
    if isinstance(tree, Leaf):
        p = tree.params
        if isinstance(p, AlbedoParams):
            return f"Albedo(color={_fmt_vec(p.color)})"
        if isinstance(p, DiffRefParams):
            s = f"DiffRef(lobe={_fmt_vec(p.lobe)}, ambient={format_number(p.ambient)}"
            if p.bands is not None:
                s += f", bands={p.bands}"
            return s + ")"
        if isinstance(p, HighlightParams):
            s = f"Highlight(lobe={_fmt_vec(p.lobe)}, sharpness={format_number(p.sharpness)}"
            if p.bands is not None:
                s += f", bands={p.bands}"
            return s + ")"
        if isinstance(p, EnvRefParams):
            if p.path is not None:
                return f'EnvRef(path="{p.path}", rotation={format_number(p.rotation)})'
            return f"EnvRef(index={p.env_index}, rotation={format_number(p.rotation)})"
        raise TypeError(f"unknown leaf params {p!r}")
    if tree.op is OpKind.MIX:
        return (f"Mix({print_tree(tree.left)}, {print_tree(tree.right)}, "
                f"{print_mask(tree.mask)})")
    return f"{tree.op.value}({print_tree(tree.left)}, {print_tree(tree.right)})"


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Tok:
    kind: str      # IDENT NUMBER STRING PUNCT EOF
    text: str
    line: int
    col: int


_PUNCT = set("()[]=,")


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        start_line, start_col = line, col
        if ch in _PUNCT:
            toks.append(_Tok("PUNCT", ch, start_line, start_col))
            i += 1
            col += 1
            continue
        if ch == '"':
            j = text.find('"', i + 1)
            if j < 0:
                raise DslSyntaxError("unterminated string", start_line, start_col)
            toks.append(_Tok("STRING", text[i + 1:j], start_line, start_col))
            col += j - i + 1
            i = j + 1
            continue
        if ch.isdigit() or ch in "+-.":
            j = i
            while j < n and (text[j].isdigit() or text[j] in "+-.eE"):
                # Stop a number before a sign that does not follow an exponent.
                if text[j] in "+-" and j > i and text[j - 1] not in "eE":
                    break
                j += 1
            lit = text[i:j]
            try:
                float(lit)
            except ValueError:
                raise DslSyntaxError(f"bad number literal {lit!r}", start_line, start_col)
            toks.append(_Tok("NUMBER", lit, start_line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(_Tok("IDENT", text[i:j], start_line, start_col))
            col += j - i
            i = j
            continue
        raise DslSyntaxError(f"unexpected character {ch!r}", start_line, start_col)
    toks.append(_Tok("EOF", "", line, col))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def next(self) -> _Tok:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.next()
        if tok.text != text:
            raise DslSyntaxError(f"expected {text!r}, found {tok.text!r}",
                                 tok.line, tok.col)
        return tok

    def fail(self, message: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        raise DslSyntaxError(message, tok.line, tok.col)

    # -- value parsers ------------------------------------------------------

    def parse_number(self) -> float:
        tok = self.next()
        if tok.kind != "NUMBER":
            self.fail(f"expected a number, found {tok.text!r}", tok)
        return float(tok.text)

    def parse_value(self):
        tok = self.peek()
        if tok.kind == "NUMBER":
            return self.parse_number()
        if tok.kind == "STRING":
            return self.next().text
        if tok.text == "[":
            self.next()
            vec = [self.parse_number()]
            while self.peek().text == ",":
                self.next()
                vec.append(self.parse_number())
            self.expect("]")
            if len(vec) != 3:
                self.fail(f"expected a 3-vector, got {len(vec)} components", tok)
            return tuple(vec)
        if tok.kind == "IDENT" and tok.text in ("true", "false"):
            return self.next().text == "true"
        self.fail(f"expected a value, found {tok.text!r}", tok)

    def parse_kwargs(self) -> dict:
        """Parse `name=value {, name=value}` until the closing paren."""
        kwargs = {}
        while True:
            tok = self.next()
            if tok.kind != "IDENT":
                self.fail(f"expected a parameter name, found {tok.text!r}", tok)
            self.expect("=")
            if tok.text in kwargs:
                self.fail(f"duplicate parameter {tok.text!r}", tok)
            kwargs[tok.text] = self.parse_value()
            if self.peek().text != ",":
                break
            self.next()
        return kwargs

    # -- node parsers -------------------------------------------------------

    def parse_tree(self) -> ShadeTree:
        tok = self.next()
        if tok.kind != "IDENT":
            self.fail(f"expected a node name, found {tok.text!r}", tok)
        name = tok.text
        self.expect("(")
        try:
            if name in ("Multiply", "Screen", "Mix"):
                node = self._parse_interior(OpKind(name), tok)
            elif name in ("Albedo", "DiffRef", "Highlight", "EnvRef"):
                node = self._parse_leaf(name, tok)
            else:
                self.fail(f"unknown node {name!r}", tok)
        except (ParamRangeError, ArityError):
            raise
        self.expect(")")
        return node

    def _parse_interior(self, op: OpKind, tok: _Tok) -> Interior:
        left = self.parse_tree()
        self.expect(",")
        right = self.parse_tree()
        mask = None
        if self.peek().text == ",":
            self.next()
            mask = self.parse_mask()
        if op is OpKind.MIX and mask is None:
            raise ArityError(f"Mix needs a mask as its third argument "
                             f"(line {tok.line}, column {tok.col})")
        if op is not OpKind.MIX and mask is not None:
            raise ArityError(f"{op.value} takes exactly two arguments "
                             f"(line {tok.line}, column {tok.col})")
        return Interior(op, left, right, mask)

    def _parse_leaf(self, name: str, tok: _Tok) -> Leaf:
        kwargs = self.parse_kwargs()

        def take(key, required=True, default=None):
            if key in kwargs:
                return kwargs.pop(key)
            if required:
                self.fail(f"{name} is missing parameter {key!r}", tok)
            return default

        if name == "Albedo":
            params = AlbedoParams(self._as_vec(take("color"), "color", tok))
        elif name == "DiffRef":
            params = DiffRefParams(self._as_vec(take("lobe"), "lobe", tok),
                                   take("ambient"),
                                   self._as_bands(take("bands", False), tok))
        elif name == "Highlight":
            params = HighlightParams(self._as_vec(take("lobe"), "lobe", tok),
                                     take("sharpness"),
                                     self._as_bands(take("bands", False), tok))
        else:  # EnvRef
            index = take("index", required=False)
            path = take("path", required=False)
            rotation = take("rotation", required=False, default=0.0)
            if index is None and path is None:
                self.fail("EnvRef needs index= or path=", tok)
            params = EnvRefParams(None if index is None else self._as_int(index, tok),
                                  rotation, path)
        if kwargs:
            self.fail(f"{name} got unknown parameter {next(iter(kwargs))!r}", tok)
        return Leaf(LeafFamily(name), params)

    def parse_mask(self) -> MaskSpec:
        tok = self.next()
        if tok.kind != "IDENT" or tok.text not in ("HalfSpace", "Raster"):
            self.fail(f"expected a mask (HalfSpace or Raster), found {tok.text!r}", tok)
        self.expect("(")
        kwargs = self.parse_kwargs()
        self.expect(")")
        if tok.text == "HalfSpace":
            missing = {"dir", "t"} - kwargs.keys()
            if missing:
                self.fail(f"HalfSpace is missing {sorted(missing)}", tok)
            return HalfSpaceMask(self._as_vec(kwargs["dir"], "dir", tok), kwargs["t"],
                                 kwargs.get("softness", 0.0),
                                 kwargs.get("binarize", True))
        missing = {"w", "h", "data"} - kwargs.keys()
        if missing:
            self.fail(f"Raster is missing {sorted(missing)}", tok)
        return RasterMask.decode(self._as_int(kwargs["w"], tok),
                                 self._as_int(kwargs["h"], tok), kwargs["data"])

    def _as_vec(self, value, what: str, tok: _Tok):
        if not isinstance(value, tuple):
            self.fail(f"{what} must be a 3-vector like [0,0,1]", tok)
        return value

    def _as_int(self, value, tok: _Tok) -> int:
        if not isinstance(value, float) or not value.is_integer():
            self.fail(f"expected an integer, got {value!r}", tok)
        return int(value)

    def _as_bands(self, value, tok: _Tok):
        if value is None:
            return None
        return self._as_int(value, tok)


def parse_tree(text: str) -> ShadeTree:
    """Parse DSL text into a ShadeTree.

    Raises DslSyntaxError (with line/column) on malformed input,
    ParamRangeError on out-of-range parameters, and ArityError when Mix
    lacks its mask.
    """
    parser = _Parser(text)
    tree = parser.parse_tree()
    tok = parser.peek()
    if tok.kind != "EOF":
        parser.fail(f"unexpected trailing input {tok.text!r}", tok)
    return tree
