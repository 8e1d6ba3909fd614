//! Deterministic parsing of model output: reasoning-markup stripping, marker
//! splitting, fenced-block extraction, splitting a discovery snippet into
//! single-declaration candidates, and judge verdicts.

use crate::syntax;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("extraction: marker missing ({marker:?})")]
    MarkerMissing { marker: String },
}

/// Marker and fence conventions for one stage. Marker matching always
/// ignores ASCII case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionRules {
    pub marker: String,
}

impl ExtractionRules {
    pub const FENCE: &'static str = "```";

    pub fn new(marker: impl Into<String>) -> Self {
        ExtractionRules { marker: marker.into() }
    }
}

/// Text after the line holding the last case-insensitive occurrence of the
/// marker; if that text has fenced blocks, the interior of the last one.
pub fn extract_after_marker(response: &str, rules: &ExtractionRules) -> Result<String, ExtractError> {
    let missing = || ExtractError::MarkerMissing { marker: rules.marker.clone() };
    if rules.marker.is_empty() {
        return Err(missing());
    }
    // ASCII lowercasing keeps byte offsets intact.
    let haystack = response.to_ascii_lowercase();
    let needle = rules.marker.to_ascii_lowercase();
    let pos = haystack.rfind(&needle).ok_or_else(missing)?;
    let marker_end = pos + needle.len();
    let rest = match response[marker_end..].find('\n') {
        Some(nl) => &response[marker_end + nl + 1..],
        None => "",
    };
    Ok(extract_code_block(rest))
}

/// Interior of the last fenced block, or the whole text when there is none,
/// trimmed of leading and trailing blank lines. An unterminated final fence
/// runs to the end of the text.
pub fn extract_code_block(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let mut last_block: Option<(usize, usize)> = None;
    let mut open: Option<usize> = None;
    for (i, line) in lines.iter().enumerate() {
        if line.trim_start().starts_with(ExtractionRules::FENCE) {
            match open.take() {
                Some(start) => last_block = Some((start, i)),
                None => open = Some(i + 1),
            }
        }
    }
    if let Some(start) = open {
        last_block = Some((start, lines.len()));
    }
    let body = match last_block {
        Some((start, end)) => &lines[start..end],
        None => &lines[..],
    };
    trim_blank_lines(body).join("\n")
}

fn trim_blank_lines<'a, 'b>(lines: &'b [&'a str]) -> &'b [&'a str] {
    let start = lines.iter().position(|l| !l.trim().is_empty()).unwrap_or(lines.len());
    let end = lines.iter().rposition(|l| !l.trim().is_empty()).map_or(start, |i| i + 1);
    &lines[start..end]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stripped {
    pub text: String,
    /// An opening `<think>` had no matching close; everything from it on was dropped.
    pub unbalanced: bool,
}

/// Removes `<think>…</think>` spans.
pub fn strip_reasoning_markup(response: &str) -> Stripped {
    const OPEN: &str = "<think>";
    const CLOSE: &str = "</think>";
    let mut text = String::with_capacity(response.len());
    let mut rest = response;
    loop {
        let Some(open) = rest.find(OPEN) else {
            text.push_str(rest);
            return Stripped { text, unbalanced: false };
        };
        text.push_str(&rest[..open]);
        let after_open = &rest[open + OPEN.len()..];
        match after_open.find(CLOSE) {
            Some(close) => rest = &after_open[close + CLOSE.len()..],
            None => return Stripped { text, unbalanced: true },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCandidate {
    pub preamble: String,
    pub statement: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitOutcome {
    pub pairs: Vec<SplitCandidate>,
    /// Non-blank lines belonging to `def`, `abbrev` and other non-lemma commands.
    pub discarded_lines: usize,
    /// `variable` lines kept in preambles.
    pub variable_lines: usize,
}

/// Splits a discovery snippet into (preamble, declaration) pairs.
///
/// Context lines (`import`, `open`, `set_option`, `variable`, `universe`)
/// accumulate into the preamble of every declaration that follows them.
/// Attribute lines, doc comments and `open … in` lines directly above a
/// declaration travel with it. A declaration runs until the next
/// declaration or top-level command; trailing blank and comment lines are
/// dropped from it.
pub fn split_candidates(snippet: &str) -> SplitOutcome {
    let raw: Vec<&str> = snippet.lines().map(|l| l.trim_end_matches('\r')).collect();
    let masked_text = syntax::mask_comments_and_strings(snippet);
    let masked: Vec<&str> = masked_text.lines().map(|l| l.trim_end_matches('\r')).collect();
    debug_assert_eq!(raw.len(), masked.len());

    let mut out = SplitOutcome::default();
    let mut preamble: Vec<String> = Vec::new();
    let mut current: Option<(String, Vec<usize>)> = None;
    let mut attached: Vec<usize> = Vec::new();
    let mut discarding = false;

    let finish = |current: &mut Option<(String, Vec<usize>)>, out: &mut SplitOutcome| {
        if let Some((pre, mut idx)) = current.take() {
            while let Some(&last) = idx.last() {
                if masked[last].trim().is_empty() {
                    idx.pop();
                } else {
                    break;
                }
            }
            let statement = idx.iter().map(|&i| raw[i]).collect::<Vec<_>>().join("\n");
            out.pairs.push(SplitCandidate { preamble: pre, statement });
        }
    };

    let mut i = 0;
    while i < raw.len() {
        let line = raw[i];
        let m = masked[i];
        if syntax::is_declaration_start(m) {
            finish(&mut current, &mut out);
            let mut idx = std::mem::take(&mut attached);
            idx.push(i);
            current = Some((preamble.join("\n"), idx));
            discarding = false;
        } else if syntax::is_context_line(m) && !line.starts_with(char::is_whitespace) {
            finish(&mut current, &mut out);
            out.discarded_lines += attached.drain(..).count();
            let ctx = line.trim().to_string();
            if syntax::is_context_line(&ctx) && ctx.starts_with("variable") {
                out.variable_lines += 1;
            }
            if !preamble.contains(&ctx) {
                preamble.push(ctx);
            }
            discarding = false;
        } else if syntax::is_attribute_line(m) || syntax::is_open_in_line(m) {
            finish(&mut current, &mut out);
            attached.push(i);
        } else if syntax::is_doc_comment_start(line) && (current.is_none() || !line.starts_with(char::is_whitespace)) {
            finish(&mut current, &mut out);
            // doc comment runs to the line where the masked block closes
            attached.push(i);
            let mut depth_closed = line.trim_start()[3..].contains("-/");
            while !depth_closed && i + 1 < raw.len() {
                i += 1;
                attached.push(i);
                depth_closed = raw[i].contains("-/");
            }
        } else if syntax::is_other_command(m) {
            finish(&mut current, &mut out);
            out.discarded_lines += attached.drain(..).filter(|&a| !raw[a].trim().is_empty()).count();
            out.discarded_lines += 1;
            discarding = true;
        } else if let Some((_, idx)) = current.as_mut() {
            idx.push(i);
        } else if discarding && !m.trim().is_empty() {
            out.discarded_lines += 1;
        } else if !attached.is_empty() && !m.trim().is_empty() {
            attached.push(i);
        }
        i += 1;
    }
    finish(&mut current, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParsedVerdict {
    Correct,
    Wrong,
    Unparseable,
}

/// Judge decision from the last non-empty line of the response.
pub fn parse_verdict(response: &str) -> ParsedVerdict {
    let Some(last) = response.lines().map(str::trim_end).rfind(|l| !l.trim().is_empty()) else {
        return ParsedVerdict::Unparseable;
    };
    let starts_with_ci = |prefix: &str| {
        last.len() >= prefix.len() && last.as_bytes()[..prefix.len()].eq_ignore_ascii_case(prefix.as_bytes())
    };
    if starts_with_ci("correct") {
        ParsedVerdict::Correct
    } else if starts_with_ci("wrong") {
        ParsedVerdict::Wrong
    } else {
        ParsedVerdict::Unparseable
    }
}
