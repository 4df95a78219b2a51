from .corpus_io import HEADER, CorpusError, read_corpus, write_corpus
from .font import FONT_CHARS, glyph
from .render import CorpusConfig, RenderError, SegSample, generate_corpus, render_clean, render_sample

__all__ = [
    "HEADER", "CorpusConfig", "CorpusError", "FONT_CHARS", "RenderError", "SegSample",
    "generate_corpus", "glyph", "read_corpus", "render_clean", "render_sample", "write_corpus",
]
