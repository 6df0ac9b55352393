/// Longest identifier accepted for API names, graph ids and graph states.
pub(crate) const MAX_IDENT_LEN: usize = 128;

/// ASCII letters, digits, `_`, `-` and `.`; non-empty; bounded length.
pub(crate) fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_IDENT_LEN
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifiers() {
        assert!(is_identifier("Send_Email"));
        assert!(is_identifier("graph-1.v2"));
        assert!(!is_identifier(""));
        assert!(!is_identifier("has space"));
        assert!(!is_identifier("<D>"));
        assert!(!is_identifier(&"a".repeat(MAX_IDENT_LEN + 1)));
    }
}
