use std::collections::HashSet;

const QUOTES: [char; 3] = ['\'', '"', '`'];

/// Normalized descriptor surfaces parsed from one LLM answer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedList {
    pub surfaces: Vec<String>,
    /// Set when the answer had content but yielded nothing usable, or ended
    /// inside an open quote.
    pub warning: Option<String>,
}

/// Lowercase, strip surrounding quotes (and trailing full stops), collapse
/// inner whitespace.
pub fn normalize_surface(raw: &str) -> String {
    let s = raw
        .trim()
        .trim_start_matches(|c: char| QUOTES.contains(&c) || c.is_whitespace())
        .trim_end_matches(|c: char| QUOTES.contains(&c) || c == '.' || c.is_whitespace());
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Splits a comma-separated list such as `'user experience', 'color'`.
///
/// A quote opens a quoted item only at the start of an item, and closes it
/// only when followed by a comma or the end of input, so apostrophes inside
/// words (`aren't`) do not derail the split. Items are normalized with
/// [`normalize_surface`], empties dropped and duplicates removed keeping the
/// first occurrence.
pub fn parse_descriptor_list(raw: &str) -> ParsedList {
    let chars: Vec<char> = raw.chars().collect();
    let mut items = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    let mut at_item_start = true;

    for (i, &c) in chars.iter().enumerate() {
        match quote {
            None => {
                if c == ',' {
                    items.push(std::mem::take(&mut cur));
                    at_item_start = true;
                    continue;
                }
                if at_item_start && QUOTES.contains(&c) {
                    quote = Some(c);
                    at_item_start = false;
                } else if !c.is_whitespace() {
                    at_item_start = false;
                }
                cur.push(c);
            }
            Some(q) => {
                cur.push(c);
                if c == q {
                    let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                    if matches!(next, None | Some(',')) {
                        quote = None;
                    }
                }
            }
        }
    }
    items.push(cur);

    let mut seen = HashSet::new();
    let surfaces: Vec<String> = items
        .iter()
        .map(|s| normalize_surface(s))
        .filter(|s| !s.is_empty())
        .filter(|s| seen.insert(s.clone()))
        .collect();

    let warning = if quote.is_some() {
        Some("unterminated quote".to_string())
    } else if surfaces.is_empty() && !raw.trim().is_empty() {
        Some("no descriptors found in response".to_string())
    } else {
        None
    };
    ParsedList { surfaces, warning }
}

/// Inverse of [`parse_descriptor_list`] for normalized surfaces.
pub fn join_descriptor_list(items: &[String]) -> String {
    items
        .iter()
        .map(|s| {
            if s.contains('\'') {
                format!("\"{s}\"")
            } else {
                format!("'{s}'")
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}
