//! Line- and token-level helpers over Lean source text. None of this parses
//! Lean; it recognizes just enough surface structure to split snippets,
//! find the proof placeholder and compare declaration headers.

const MODIFIERS: &[&str] = &["private", "protected", "nonrec", "noncomputable", "unsafe", "partial"];
const DECL_KEYWORDS: &[&str] = &["lemma", "theorem"];
const CONTEXT_KEYWORDS: &[&str] = &["import", "open", "set_option", "variable", "universe"];
const OTHER_COMMANDS: &[&str] = &[
    "def",
    "abbrev",
    "instance",
    "example",
    "structure",
    "class",
    "inductive",
    "namespace",
    "section",
    "end",
    "attribute",
    "notation",
    "infix",
    "infixl",
    "infixr",
    "prefix",
    "postfix",
    "macro",
    "macro_rules",
    "syntax",
    "elab",
    "axiom",
    "opaque",
    "mutual",
    "#check",
    "#eval",
    "#print",
    "#reduce",
    "#exit",
    "#lint",
    "local",
    "scoped",
    "deriving",
    "initialize",
];

fn first_token(s: &str) -> &str {
    s.split(|c: char| c.is_whitespace()).next().unwrap_or("")
}

/// Strips any `@[...]` attribute groups at the start of `s`.
fn skip_attributes(mut s: &str) -> Option<&str> {
    loop {
        let t = s.trim_start();
        if !t.starts_with("@[") {
            return Some(t);
        }
        let mut depth = 0usize;
        let mut end = None;
        for (i, c) in t.char_indices() {
            match c {
                '[' => depth += 1,
                ']' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i + 1);
                        break;
                    }
                }
                _ => {}
            }
        }
        s = &t[end?..];
    }
}

fn skip_modifiers(mut s: &str) -> &str {
    loop {
        let t = s.trim_start();
        let tok = first_token(t);
        if MODIFIERS.contains(&tok) {
            s = &t[tok.len()..];
        } else {
            return t;
        }
    }
}

/// Leading keyword of a command line after attributes and modifiers.
fn command_keyword(line: &str) -> Option<&str> {
    let rest = skip_modifiers(skip_attributes(line)?);
    let tok = first_token(rest);
    (!tok.is_empty()).then_some(tok)
}

/// A line opening a `lemma` or `theorem` declaration.
pub fn is_declaration_start(line: &str) -> bool {
    command_keyword(line).is_some_and(|k| DECL_KEYWORDS.contains(&k))
}

/// An attribute group standing alone on its line.
pub fn is_attribute_line(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("@[") && skip_attributes(t).is_some_and(|rest| rest.trim().is_empty())
}

/// `open Foo in`, which scopes the following declaration only.
pub fn is_open_in_line(line: &str) -> bool {
    let t = line.trim();
    first_token(t) == "open" && t.split_whitespace().last() == Some("in") && t.split_whitespace().count() >= 3
}

/// Context lines kept in a candidate's preamble.
pub fn is_context_line(line: &str) -> bool {
    CONTEXT_KEYWORDS.contains(&first_token(line.trim_start())) && !is_open_in_line(line)
}

pub fn is_import_line(line: &str) -> bool {
    first_token(line.trim_start()) == "import"
}

/// A column-0 command other than a lemma/theorem or context line.
pub fn is_other_command(line: &str) -> bool {
    if line.starts_with(char::is_whitespace) || line.is_empty() {
        return false;
    }
    command_keyword(line).is_some_and(|k| OTHER_COMMANDS.contains(&k))
}

pub fn is_doc_comment_start(line: &str) -> bool {
    line.trim_start().starts_with("/--")
}

pub fn is_line_comment(line: &str) -> bool {
    line.trim_start().starts_with("--")
}

/// Number of declaration header lines in `text`.
pub fn count_declarations(text: &str) -> usize {
    let masked = mask_comments_and_strings(text);
    masked.lines().filter(|l| is_declaration_start(l)).count()
}

/// Name following the `lemma`/`theorem` keyword.
pub fn declaration_name(decl: &str) -> Option<String> {
    let masked = mask_comments_and_strings(decl);
    let (offset, line) = line_offsets(&masked).find(|(_, l)| is_declaration_start(l))?;
    let rest = skip_modifiers(skip_attributes(line)?);
    let kw = first_token(rest);
    let after = rest[kw.len()..].trim_start();
    let name = first_token(after);
    if name.is_empty() || name.starts_with(['(', '{', '[', ':', '⦃']) {
        return None;
    }
    let start = offset + (line.len() - after.len());
    Some(decl[start..start + name.len()].to_string())
}

fn line_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |l| {
        let o = offset;
        offset += l.len();
        (o, l.trim_end_matches(['\n', '\r']))
    })
}

/// Replaces the contents of comments and string literals with spaces,
/// preserving byte offsets. Block comments nest.
pub fn mask_comments_and_strings(code: &str) -> String {
    let bytes = code.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    let mut block_depth = 0usize;
    let mut in_line_comment = false;
    let mut in_string = false;
    let blank = |out: &mut Vec<u8>, b: u8| {
        out.push(if b == b'\n' {
            b'\n'
        } else if b < 0x80 {
            b' '
        } else {
            b
        })
    };
    while i < bytes.len() {
        let b = bytes[i];
        let next = bytes.get(i + 1).copied();
        if in_line_comment {
            if b == b'\n' {
                in_line_comment = false;
                out.push(b);
            } else {
                blank(&mut out, b);
            }
            i += 1;
        } else if block_depth > 0 {
            if b == b'/' && next == Some(b'-') {
                block_depth += 1;
                out.extend_from_slice(b"  ");
                i += 2;
            } else if b == b'-' && next == Some(b'/') {
                block_depth -= 1;
                out.extend_from_slice(b"  ");
                i += 2;
            } else {
                blank(&mut out, b);
                i += 1;
            }
        } else if in_string {
            if let (b'\\', Some(n)) = (b, next) {
                blank(&mut out, b);
                blank(&mut out, n);
                i += 2;
            } else {
                if b == b'"' {
                    in_string = false;
                    out.push(b'"');
                } else {
                    blank(&mut out, b);
                }
                i += 1;
            }
        } else if b == b'-' && next == Some(b'-') {
            in_line_comment = true;
            out.extend_from_slice(b"  ");
            i += 2;
        } else if b == b'/' && next == Some(b'-') {
            block_depth = 1;
            out.extend_from_slice(b"  ");
            i += 2;
        } else if b == b'"' {
            in_string = true;
            out.push(b'"');
            i += 1;
        } else {
            out.push(b);
            i += 1;
        }
    }
    // Multi-byte characters inside comments are copied through unchanged,
    // so the buffer is still valid UTF-8.
    String::from_utf8(out).expect("masking preserves UTF-8")
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '\'' | '.' | '!' | '?' | '₀'..='₉')
}

/// Byte offsets of `sorry` tokens outside comments and strings.
pub fn sorry_positions(code: &str) -> Vec<usize> {
    let masked = mask_comments_and_strings(code);
    let mut found = Vec::new();
    let mut from = 0;
    while let Some(rel) = masked[from..].find("sorry") {
        let at = from + rel;
        let before = masked[..at].chars().next_back();
        let after = masked[at + 5..].chars().next();
        if !before.is_some_and(is_ident_char) && !after.is_some_and(is_ident_char) {
            found.push(at);
        }
        from = at + 5;
    }
    found
}

pub fn contains_sorry(code: &str) -> bool {
    !sorry_positions(code).is_empty()
}

/// Splits a declaration at the `:=` that starts its body: the first one at
/// bracket depth zero outside comments and strings. Returns (head, body).
pub fn split_head(decl: &str) -> Option<(&str, &str)> {
    let masked = mask_comments_and_strings(decl);
    let start = line_offsets(&masked).find(|(_, l)| is_declaration_start(l)).map(|(o, _)| o)?;
    let mut depth: i32 = 0;
    let mut prev = '\0';
    for (i, c) in masked[start..].char_indices() {
        match c {
            '(' | '[' | '{' | '⟨' | '⦃' => depth += 1,
            ')' | ']' | '}' | '⟩' | '⦄' => depth -= 1,
            '=' if prev == ':' && depth == 0 => {
                let at = start + i - 1;
                return Some((&decl[..at], &decl[at + 2..]));
            }
            _ => {}
        }
        prev = c;
    }
    None
}

/// The declaration's signature after its keyword, whitespace-collapsed:
/// name, binders and proposition. Used to check that a proof proves the
/// statement it was given.
pub fn signature(decl: &str) -> Option<String> {
    let (head, _) = split_head(decl)?;
    let masked = mask_comments_and_strings(head);
    let (offset, line) = line_offsets(&masked).find(|(_, l)| is_declaration_start(l))?;
    let rest = skip_modifiers(skip_attributes(line)?);
    let kw = first_token(rest);
    let sig_start = offset + (line.len() - rest.len()) + kw.len();
    let sig = &masked[sig_start..];
    Some(sig.split_whitespace().collect::<Vec<_>>().join(" "))
}
