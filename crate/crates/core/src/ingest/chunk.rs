use std::ops::Range;

use super::{Chunk, ChunkStrategy, ChunkingConfig, Document, IngestError, Span};
use crate::tokenize::token_spans;

/// Splits a document into ordered chunks.
///
/// Chunk boundaries always fall on token boundaries. With `token_window` a
/// window of `max_chunk_tokens` slides over the token stream with a stride of
/// `max_chunk_tokens - overlap_tokens`. With `speaker_turn` whole turns are
/// packed greedily; a turn longer than the budget is windowed on its own.
/// Documents without turns fall back to `token_window`.
pub fn chunk_document(doc: &Document, cfg: &ChunkingConfig) -> Result<Vec<Chunk>, IngestError> {
    cfg.validate()?;
    let tokens = token_spans(&doc.text);
    if tokens.is_empty() {
        return Err(IngestError::EmptyDocument {
            path: doc.source_path.clone().into(),
        });
    }

    let mut pieces = match (cfg.strategy, doc.turns.as_deref()) {
        (ChunkStrategy::SpeakerTurn, Some(turns)) if !turns.is_empty() => {
            let turn_ranges = turns.iter().map(|t| {
                let lo = tokens.partition_point(|r| r.start < t.span.start);
                let hi = tokens.partition_point(|r| r.start < t.span.end);
                lo..hi
            });
            pack_turns(turn_ranges, cfg)
        }
        _ => windows(0..tokens.len(), cfg.max_chunk_tokens, cfg.overlap_tokens),
    };
    merge_short_tail(&mut pieces, cfg);

    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(ordinal, r)| {
            let span = Span::new(tokens[r.start].start, tokens[r.end - 1].end);
            Chunk {
                id: Chunk::make_id(&doc.id, ordinal),
                doc_id: doc.id.clone(),
                ordinal,
                text: doc.text[span.range()].to_string(),
                span,
                token_count: r.len(),
            }
        })
        .collect())
}

/// Token-index windows over `range`.
fn windows(range: Range<usize>, width: usize, overlap: usize) -> Vec<Range<usize>> {
    let stride = width - overlap;
    let mut out = Vec::new();
    let mut start = range.start;
    loop {
        let end = (start + width).min(range.end);
        out.push(start..end);
        if end == range.end {
            return out;
        }
        start += stride;
    }
}

fn pack_turns(
    turn_ranges: impl Iterator<Item = Range<usize>>,
    cfg: &ChunkingConfig,
) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut open: Option<Range<usize>> = None;
    for turn in turn_ranges.filter(|r| !r.is_empty()) {
        if turn.len() > cfg.max_chunk_tokens {
            out.extend(open.take());
            out.extend(windows(turn, cfg.max_chunk_tokens, cfg.overlap_tokens));
            continue;
        }
        match open.as_mut() {
            Some(group) if group.len() + turn.len() <= cfg.max_chunk_tokens => group.end = turn.end,
            _ => {
                out.extend(open.take());
                open = Some(turn);
            }
        }
    }
    out.extend(open);
    out
}

/// Folds a trailing piece shorter than `min_chunk_tokens` into its
/// predecessor when the result still fits the token budget.
fn merge_short_tail(pieces: &mut Vec<Range<usize>>, cfg: &ChunkingConfig) {
    let n = pieces.len();
    if n < 2 || pieces[n - 1].len() >= cfg.min_chunk_tokens {
        return;
    }
    let merged = pieces[n - 2].start..pieces[n - 1].end;
    if merged.len() <= cfg.max_chunk_tokens {
        pieces.pop();
        pieces[n - 2] = merged;
    }
}
