/// Splits one line into word tokens.
///
/// Whitespace-separated chunks are split further by peeling off leading and
/// trailing non-alphanumeric characters one at a time, so `crazy.` becomes
/// `crazy` `.` while `don't` and `well-known` stay whole. This approximates
/// the Moses tokenizer and is not byte-compatible with it.
pub fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in line.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric());
        let Some(start) = start else {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let end = chars.iter().rposition(|c| c.is_alphanumeric()).unwrap_or(start) + 1;
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        let word: String = chars[start..end].iter().collect();
        out.push(if lowercase { word.to_lowercase() } else { word });
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}
