//! Strict unified-diff application. Every context and removed line must
//! match the base text exactly at the position the hunk header names; there
//! is no fuzz and no offset search.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Named file contents.
pub type FileSet = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Line {
    Context(String),
    Remove(String),
    Add(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Hunk {
    old_start: usize,
    old_len: usize,
    new_start: usize,
    new_len: usize,
    lines: Vec<Line>,
}

/// The hunks of one file section. `None` paths stand for `/dev/null`.
#[derive(Debug, Clone, PartialEq, Eq)]
struct FilePatch {
    old_path: Option<String>,
    new_path: Option<String>,
    hunks: Vec<Hunk>,
}

impl FilePatch {
    fn name(&self) -> &str {
        self.new_path.as_deref().or(self.old_path.as_deref()).unwrap_or("")
    }

    fn reversed(&self) -> FilePatch {
        FilePatch {
            old_path: self.new_path.clone(),
            new_path: self.old_path.clone(),
            hunks: self
                .hunks
                .iter()
                .map(|h| Hunk {
                    old_start: h.new_start,
                    old_len: h.new_len,
                    new_start: h.old_start,
                    new_len: h.old_len,
                    lines: h
                        .lines
                        .iter()
                        .map(|l| match l {
                            Line::Context(s) => Line::Context(s.clone()),
                            Line::Remove(s) => Line::Add(s.clone()),
                            Line::Add(s) => Line::Remove(s.clone()),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

fn malformed(file: &str, hunk: usize, message: impl Into<String>) -> Error {
    Error::PatchApply {
        file: file.to_owned(),
        hunk,
        message: message.into(),
    }
}

fn header_path(rest: &str, prefix: &str) -> Option<String> {
    let raw = rest.trim_end_matches(['\n', '\r']);
    let raw = raw.split('\t').next().unwrap_or(raw).trim_end();
    if raw == "/dev/null" {
        return None;
    }
    Some(raw.strip_prefix(prefix).unwrap_or(raw).to_owned())
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    match s.split_once(',') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_hunk_header(line: &str) -> Option<(usize, usize, usize, usize)> {
    let body = line.strip_prefix("@@ -")?;
    let (ranges, _) = body.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let (os, ol) = parse_range(old)?;
    let (ns, nl) = parse_range(new)?;
    Some((os, ol, ns, nl))
}

fn parse(text: &str) -> Result<Vec<FilePatch>> {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut patches = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let Some(old) = lines[i].strip_prefix("--- ") else {
            i += 1;
            continue;
        };
        let Some(new) = lines.get(i + 1).and_then(|l| l.strip_prefix("+++ ")) else {
            return Err(malformed(
                "",
                0,
                format!("`---` header on line {} without `+++`", i + 1),
            ));
        };
        let mut fp = FilePatch {
            old_path: header_path(old, "a/"),
            new_path: header_path(new, "b/"),
            hunks: Vec::new(),
        };
        if fp.old_path.is_none() && fp.new_path.is_none() {
            return Err(malformed("/dev/null", 0, "both sides of the header are /dev/null"));
        }
        i += 2;
        while i < lines.len() && lines[i].starts_with("@@ ") {
            let hunk_no = fp.hunks.len() + 1;
            let (old_start, old_len, new_start, new_len) =
                parse_hunk_header(lines[i]).ok_or_else(|| malformed(fp.name(), hunk_no, "bad hunk header"))?;
            i += 1;
            let mut hunk = Hunk {
                old_start,
                old_len,
                new_start,
                new_len,
                lines: Vec::new(),
            };
            let (mut seen_old, mut seen_new) = (0, 0);
            while seen_old < old_len || seen_new < new_len {
                let Some(&raw) = lines.get(i) else {
                    return Err(malformed(fp.name(), hunk_no, "hunk ends early"));
                };
                let (tag, body) = match raw.chars().next() {
                    Some(c) if raw != "\n" => (c, &raw[c.len_utf8()..]),
                    _ => (' ', "\n"),
                };
                match tag {
                    ' ' => {
                        hunk.lines.push(Line::Context(body.to_owned()));
                        seen_old += 1;
                        seen_new += 1;
                    }
                    '-' => {
                        hunk.lines.push(Line::Remove(body.to_owned()));
                        seen_old += 1;
                    }
                    '+' => {
                        hunk.lines.push(Line::Add(body.to_owned()));
                        seen_new += 1;
                    }
                    '\\' => strip_last_newline(&mut hunk),
                    _ => return Err(malformed(fp.name(), hunk_no, format!("unexpected line {:?}", raw))),
                }
                i += 1;
            }
            if seen_old != old_len || seen_new != new_len {
                return Err(malformed(
                    fp.name(),
                    hunk_no,
                    "line counts disagree with the hunk header",
                ));
            }
            while i < lines.len() && lines[i].starts_with('\\') {
                strip_last_newline(&mut hunk);
                i += 1;
            }
            fp.hunks.push(hunk);
        }
        patches.push(fp);
    }
    Ok(patches)
}

fn strip_last_newline(hunk: &mut Hunk) {
    if let Some(Line::Context(s) | Line::Remove(s) | Line::Add(s)) = hunk.lines.last_mut() {
        if s.ends_with('\n') {
            s.pop();
        }
    }
}

fn apply_one(files: &mut FileSet, fp: &FilePatch) -> Result<()> {
    let name = fp.name().to_owned();
    let base = match &fp.old_path {
        None => {
            if files.contains_key(&name) {
                return Err(malformed(&name, 0, "patch creates a file that already exists"));
            }
            String::new()
        }
        Some(old) => files
            .get(old)
            .cloned()
            .ok_or_else(|| malformed(old, 0, "patch touches an unknown file"))?,
    };
    let src: Vec<&str> = base.split_inclusive('\n').collect();
    let mut out = String::with_capacity(base.len());
    let mut cursor = 0;
    for (h, hunk) in fp.hunks.iter().enumerate() {
        let start = if hunk.old_len == 0 {
            hunk.old_start
        } else {
            hunk.old_start.saturating_sub(1)
        };
        if start < cursor || start > src.len() {
            return Err(malformed(
                &name,
                h + 1,
                format!("hunk starts at line {} out of order or past the end", hunk.old_start),
            ));
        }
        src[cursor..start].iter().for_each(|l| out.push_str(l));
        let mut pos = start;
        for line in &hunk.lines {
            match line {
                Line::Context(s) | Line::Remove(s) => {
                    if src.get(pos) != Some(&s.as_str()) {
                        return Err(malformed(&name, h + 1, format!("context mismatch at line {}", pos + 1)));
                    }
                    if matches!(line, Line::Context(_)) {
                        out.push_str(s);
                    }
                    pos += 1;
                }
                Line::Add(s) => out.push_str(s),
            }
        }
        cursor = pos;
    }
    src[cursor..].iter().for_each(|l| out.push_str(l));
    if let Some(old) = &fp.old_path {
        files.remove(old);
    }
    match &fp.new_path {
        None => {
            if !out.is_empty() {
                return Err(malformed(&name, fp.hunks.len(), "deletion leaves content behind"));
            }
        }
        Some(new) => {
            files.insert(new.clone(), out);
        }
    }
    Ok(())
}

/// Applies `patch` to `files` and returns the patched set. An empty patch
/// returns the input unchanged.
pub fn apply_patch(files: &FileSet, patch: &str) -> Result<FileSet> {
    let mut out = files.clone();
    for fp in parse(patch)? {
        apply_one(&mut out, &fp)?;
    }
    Ok(out)
}

/// Undoes `patch`: `reverse_patch(&apply_patch(f, p)?, p)? == f`.
pub fn reverse_patch(files: &FileSet, patch: &str) -> Result<FileSet> {
    let mut out = files.clone();
    for fp in parse(patch)?.iter().rev() {
        apply_one(&mut out, &fp.reversed())?;
    }
    Ok(out)
}

/// True when `text` contains at least one file section.
pub fn looks_like_patch(text: &str) -> bool {
    parse(text).map(|p| !p.is_empty()).unwrap_or(false)
}

enum Op {
    Equal(usize),
    Delete(usize),
    Insert(usize),
}

fn edit_script(a: &[&str], b: &[&str]) -> Vec<Op> {
    let (n, m) = (a.len(), b.len());
    let mut lcs = vec![0u32; (n + 1) * (m + 1)];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i * (m + 1) + j] = if a[i] == b[j] {
                lcs[(i + 1) * (m + 1) + j + 1] + 1
            } else {
                lcs[(i + 1) * (m + 1) + j].max(lcs[i * (m + 1) + j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut ops = Vec::with_capacity(n + m);
    while i < n || j < m {
        if i < n && j < m && a[i] == b[j] {
            ops.push(Op::Equal(i));
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i * (m + 1) + j + 1] >= lcs[(i + 1) * (m + 1) + j]) {
            ops.push(Op::Insert(j));
            j += 1;
        } else {
            ops.push(Op::Delete(i));
            i += 1;
        }
    }
    ops
}

fn push_line(out: &mut String, tag: char, line: &str) {
    out.push(tag);
    out.push_str(line);
    if !line.ends_with('\n') {
        out.push_str("\n\\ No newline at end of file\n");
    }
}

/// A unified diff turning `old` into `new` for the file `name`, with three
/// lines of context. Identical texts give an empty patch.
pub fn unified_diff(name: &str, old: &str, new: &str) -> String {
    const CONTEXT: usize = 3;
    let a: Vec<&str> = old.split_inclusive('\n').collect();
    let b: Vec<&str> = new.split_inclusive('\n').collect();
    let ops = edit_script(&a, &b);
    let changes: Vec<usize> = ops
        .iter()
        .enumerate()
        .filter(|(_, op)| !matches!(op, Op::Equal(_)))
        .map(|(k, _)| k)
        .collect();
    if changes.is_empty() {
        return String::new();
    }
    // Old/new line counts consumed before each op.
    let mut before = Vec::with_capacity(ops.len() + 1);
    let (mut oi, mut ni) = (0, 0);
    for op in &ops {
        before.push((oi, ni));
        match op {
            Op::Equal(_) => {
                oi += 1;
                ni += 1;
            }
            Op::Delete(_) => oi += 1,
            Op::Insert(_) => ni += 1,
        }
    }
    before.push((oi, ni));

    let mut groups: Vec<(usize, usize)> = Vec::new();
    for &c in &changes {
        match groups.last_mut() {
            Some(g) if c - g.1 <= 2 * CONTEXT => g.1 = c,
            _ => groups.push((c, c)),
        }
    }
    let mut out = format!("--- a/{name}\n+++ b/{name}\n");
    for (first, last) in groups {
        let lo = first.saturating_sub(CONTEXT);
        let hi = (last + CONTEXT + 1).min(ops.len());
        let (o0, n0) = before[lo];
        let (o1, n1) = before[hi];
        let (ol, nl) = (o1 - o0, n1 - n0);
        let os = if ol == 0 { o0 } else { o0 + 1 };
        let ns = if nl == 0 { n0 } else { n0 + 1 };
        out.push_str(&format!("@@ -{os},{ol} +{ns},{nl} @@\n"));
        for op in &ops[lo..hi] {
            match *op {
                Op::Equal(i) => push_line(&mut out, ' ', a[i]),
                Op::Delete(i) => push_line(&mut out, '-', a[i]),
                Op::Insert(j) => push_line(&mut out, '+', b[j]),
            }
        }
    }
    out
}
