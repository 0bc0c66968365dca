//! Text normalization shared by taxonomy lookup, validation, and matching.

/// Folds full-width ASCII variants (U+FF01..=U+FF5E) to their half-width
/// forms and the ideographic space (U+3000) to a plain space. Other
/// characters pass through unchanged.
pub fn fold_width(input: &str) -> String {
    input
        .chars()
        .map(|c| match c {
            '\u{3000}' => ' ',
            '\u{FF01}'..='\u{FF5E}' => {
                char::from_u32(c as u32 - 0xFF01 + 0x21).unwrap_or(c)
            }
            _ => c,
        })
        .collect()
}

/// Canonical form for category slugs: width-folded, trimmed, lower-cased,
/// with runs of whitespace, hyphens, and underscores collapsed to a single
/// hyphen. "Patient Name", "patient_name", and "ＰＡＴＩＥＮＴ－ＮＡＭＥ"
/// all normalize to "patient-name".
pub fn normalize_slug(input: &str) -> String {
    let folded = fold_width(input);
    let lowered = folded.trim().to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_sep = false;
    for c in lowered.chars() {
        if c.is_whitespace() || c == '-' || c == '_' {
            if !out.is_empty() {
                pending_sep = true;
            }
        } else {
            if pending_sep {
                out.push('-');
                pending_sep = false;
            }
            out.push(c);
        }
    }
    out
}

/// Canonical form for entity text when matching predictions against gold:
/// width-folded, trimmed, lower-cased. Interior whitespace is preserved.
pub fn normalize_entity(input: &str) -> String {
    fold_width(input).trim().to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_width_maps_fullwidth_ascii() {
        assert_eq!(fold_width("ＨＰＶ１６＋"), "HPV16+");
        assert_eq!(fold_width("a\u{3000}b"), "a b");
        assert_eq!(fold_width("张某"), "张某");
    }

    #[test]
    fn slug_normalization_identities() {
        assert_eq!(normalize_slug("patient name"), "patient-name");
        assert_eq!(normalize_slug("PATIENT NAME "), "patient-name");
        assert_eq!(normalize_slug("patient_name"), "patient-name");
        assert_eq!(normalize_slug("  Patient -- Name "), "patient-name");
        assert_eq!(normalize_slug("ＤＡＴＥ"), "date");
    }

    #[test]
    fn entity_normalization_keeps_interior_spaces() {
        assert_eq!(normalize_entity(" HPV 16 "), "hpv 16");
        assert_eq!(normalize_entity("张某"), "张某");
    }
}
