"""
Tests for the shader template preprocessor.
"""
import pytest

from quantkern.errors import (
    IncludeCycle,
    IncludeNotFound,
    MalformedDirective,
    UnbalancedConditional,
    UnresolvedInterpolation,
)
from quantkern.kernels.library import TEMPLATES, template_params
from quantkern.kernels.types import OpKind, TuningParams
from quantkern.quant.formats import BlockFormat
from quantkern.shaderpp.preprocessor import (
    DefineSet,
    DictResolver,
    TemplateSource,
    load_template,
    package_resolver,
    preprocess,
    preprocess_with_origins,
    scan_params,
)

BRANCH = "#ifdef USE_SG\nA\n#else\nB\n#endif\n"


def test_directive_free_source_is_unchanged():
    assert preprocess(TemplateSource("fn f(){}")) == "fn f(){}"


def test_branch_selection():
    assert preprocess(TemplateSource(BRANCH), DefineSet(flags=['USE_SG'])) == "A\n"
    assert preprocess(TemplateSource(BRANCH)) == "B\n"


def test_ifndef_and_nesting():
    src = TemplateSource("#ifndef X\n#ifdef Y\nXY\n#else\nX\n#endif\n#else\nNONE\n#endif\n")
    assert preprocess(src, {'Y': 1}) == "XY\n"
    assert preprocess(src) == "X\n"
    assert preprocess(src, {'X': 1}) == "NONE\n"


def test_interpolation():
    src = TemplateSource("var<workgroup> tile: array<f32, {{TILE_K}}>;\n")
    assert preprocess(src, DefineSet({'TILE_K': 16})) == "var<workgroup> tile: array<f32, 16>;\n"


def test_unresolved_interpolation_reports_line():
    with pytest.raises(UnresolvedInterpolation) as info:
        preprocess(TemplateSource("a\nlet x = {{WG_SIZE}};\n", origin='t.wgsl'))
    assert info.value.name == 'WG_SIZE'
    assert info.value.location == 't.wgsl:2'


def test_local_define_substitutes_whole_tokens():
    src = TemplateSource("#define N 4\nlet a = N; let NN = 1;\n#undef N\nlet b = N;\n")
    assert preprocess(src) == "let a = 4; let NN = 1;\nlet b = N;\n"


def test_caller_defines_do_not_rewrite_identifiers():
    src = TemplateSource("let TILE_K = {{TILE_K}};\n")
    assert preprocess(src, {'TILE_K': 8}) == "let TILE_K = 8;\n"


def test_include_and_origins():
    resolver = DictResolver({'inc.wgsl': "included\n"})
    text, origins = preprocess_with_origins(TemplateSource('top\n#include "inc.wgsl"\nend\n', 'main.wgsl'),
                                            resolver=resolver)
    assert text == "top\nincluded\nend\n"
    assert origins == ['main.wgsl:1', 'inc.wgsl:1', 'main.wgsl:3']


def test_excluded_region_is_not_scanned_for_includes():
    src = TemplateSource('#ifdef NEVER\n#include "missing.wgsl"\n#endif\nok\n')
    assert preprocess(src, resolver=DictResolver({})) == "ok\n"


def test_include_errors():
    with pytest.raises(IncludeNotFound):
        preprocess(TemplateSource('#include "missing.wgsl"\n'), resolver=DictResolver({}))
    cyclic = DictResolver({'a.wgsl': '#include "b.wgsl"\n', 'b.wgsl': '#include "a.wgsl"\n'})
    with pytest.raises(IncludeCycle) as info:
        preprocess(cyclic('a.wgsl'), resolver=cyclic)
    assert info.value.chain == ('a.wgsl', 'b.wgsl', 'a.wgsl')
    with pytest.raises(IncludeCycle):
        scan_params(cyclic('a.wgsl'), cyclic)


@pytest.mark.parametrize('text', [
    "#ifdef A\nx\n",
    "#endif\n",
    "#else\n",
    "#ifdef A\n#else\n#else\n#endif\n",
])
def test_unbalanced_conditionals(text):
    with pytest.raises(UnbalancedConditional):
        preprocess(TemplateSource(text))


@pytest.mark.parametrize('text', ["#pragma once\n", "#ifdef\n", "#include missing.wgsl\n", "#define\n"])
def test_malformed_directives(text):
    with pytest.raises(MalformedDirective):
        preprocess(TemplateSource(text), resolver=DictResolver({}))


def test_define_set_rejects_bad_names():
    with pytest.raises(ValueError):
        DefineSet({'1BAD': 1})
    assert DefineSet({'FLAG': True, 'OFF': False}) == {'FLAG': '1', 'OFF': '0'}


def test_scan_params():
    assert scan_params(TemplateSource("")) == frozenset()
    resolver = DictResolver({'inc.wgsl': "#ifdef INNER\n{{DEPTH}}\n#endif\n"})
    src = TemplateSource('#define LOCAL 3\n{{WIDTH}} {{LOCAL}}\n#ifndef OUTER\n#include "inc.wgsl"\n#endif\n')
    assert scan_params(src, resolver) == {'WIDTH', 'OUTER', 'INNER', 'DEPTH'}


def test_matmul_template_parameters():
    found = template_params(OpKind.MATMUL)
    assert found.interpolations == {'TILE_M', 'TILE_N', 'TILE_K', 'RT_M', 'RT_N', 'WG_X', 'WG_Y',
                                    'A_TILE_LEN', 'B_TILE_LEN', 'RT_LEN'}
    assert found.flags == {'RHS_F16'} | {f"FMT_{fmt.name}" for fmt in BlockFormat}


@pytest.mark.parametrize('op', list(TEMPLATES), ids=str)
def test_bundled_templates_scan_cleanly(op):
    assert template_params(op).names


def test_preprocess_is_idempotent_on_matmul():
    p = TuningParams()
    defines = DefineSet({**p.as_dict(), 'A_TILE_LEN': p.TILE_M * p.TILE_K, 'B_TILE_LEN': p.TILE_K * p.TILE_N,
                         'RT_LEN': p.RT_M * p.RT_N}, flags=['FMT_Q4_0'])
    resolver = package_resolver()
    once = preprocess(load_template('matmul.wgsl', resolver), defines, resolver)
    assert preprocess(TemplateSource(once), defines) == once
    assert '{{' not in once
    assert not any(line.lstrip().startswith('#') for line in once.splitlines())


def test_branch_exclusivity():
    src = TemplateSource("#ifdef F\nSENTINEL_A\n#else\nSENTINEL_B\n#endif\n")
    for defines in ({}, {'F': 1}):
        out = preprocess(src, defines)
        assert ('SENTINEL_A' in out) != ('SENTINEL_B' in out)
