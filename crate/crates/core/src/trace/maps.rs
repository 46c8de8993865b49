use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// One line of `/proc/<pid>/maps`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMapping {
    pub start: u64,
    pub end: u64,
    pub perms: String,
    pub offset: u64,
    pub path: Option<PathBuf>,
}

impl MemoryMapping {
    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn is_executable(&self) -> bool {
        self.perms.as_bytes().get(2) == Some(&b'x')
    }
}

pub fn parse_maps(text: &str) -> Vec<MemoryMapping> {
    text.lines().filter_map(parse_line).collect()
}

fn take_token<'a>(rest: &mut &'a str) -> Option<&'a str> {
    let trimmed = rest.trim_start();
    if trimmed.is_empty() {
        return None;
    }
    let end = trimmed.find(char::is_whitespace).unwrap_or(trimmed.len());
    let (token, tail) = trimmed.split_at(end);
    *rest = tail;
    Some(token)
}

fn parse_line(line: &str) -> Option<MemoryMapping> {
    let mut rest = line;
    let range = take_token(&mut rest)?;
    let perms = take_token(&mut rest)?;
    let offset = take_token(&mut rest)?;
    let _dev = take_token(&mut rest)?;
    let _inode = take_token(&mut rest)?;
    // the path may contain spaces
    let path = Some(rest.trim()).filter(|p| p.starts_with('/'));
    let (start, end) = range.split_once('-')?;
    Some(MemoryMapping {
        start: u64::from_str_radix(start, 16).ok()?,
        end: u64::from_str_radix(end, 16).ok()?,
        perms: perms.to_string(),
        offset: u64::from_str_radix(offset, 16).ok()?,
        path: path.map(PathBuf::from),
    })
}
