/// Splits text into lowercase word tokens.
///
/// Whitespace delimits tokens and every punctuation character becomes a
/// token of its own, so `"Pre-heat oven"` yields `[pre, -, heat, oven]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if is_punctuation(ch) {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_lowercase().collect());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn is_punctuation(ch: char) -> bool {
    !ch.is_alphanumeric() && !ch.is_whitespace()
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn splits_trailing_period() {
        assert_eq!(toks("Mix the butter."), ["mix", "the", "butter", "."]);
    }

    #[test]
    fn empty_input() {
        assert!(toks("").is_empty());
        assert!(toks("   \t\n").is_empty());
    }

    #[test]
    fn hyphen_is_separate_token() {
        assert_eq!(toks("Pre-heat oven"), ["pre", "-", "heat", "oven"]);
    }

    #[test]
    fn runs_of_punctuation() {
        assert_eq!(toks("stir!!"), ["stir", "!", "!"]);
        assert_eq!(toks("don't"), ["don", "'", "t"]);
    }

    #[test]
    fn deterministic_on_unicode() {
        let a = toks("Crème Brûlée, then ÉCLAIR");
        assert_eq!(a, ["crème", "brûlée", ",", "then", "éclair"]);
        assert_eq!(a, toks("Crème Brûlée, then ÉCLAIR"));
    }
}
