//! Lightweight Moses-style tokenizer for social media text.
//!
//! Lowercases, splits punctuation off words and keeps URLs, `@mentions` and
//! `#hashtags` as single tokens. Hyphens and apostrophes inside a word do not
//! split it.

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_joiner(c: char) -> bool {
    matches!(c, '-' | '\'' | '’')
}

const URL_PREFIXES: [&str; 3] = ["http://", "https://", "www."];
const URL_TRAILING: &[char] = &['.', ',', '!', '?', ';', ':', ')', '"', '\'', ']'];

pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if let Some(end) = url_end(&chars, i) {
            let mut stop = end;
            while stop > i + 1 && URL_TRAILING.contains(&chars[stop - 1]) {
                stop -= 1;
            }
            out.push(chars[i..stop].iter().collect::<String>().to_lowercase());
            for &p in &chars[stop..end] {
                out.push(p.to_string());
            }
            i = end;
            continue;
        }
        if (c == '@' || c == '#') && chars.get(i + 1).is_some_and(|&n| is_word_char(n)) {
            let mut j = i + 1;
            while j < chars.len() && is_word_char(chars[j]) {
                j += 1;
            }
            out.push(chars[i..j].iter().collect::<String>().to_lowercase());
            i = j;
            continue;
        }
        if is_word_char(c) {
            let mut j = i + 1;
            while j < chars.len() {
                if is_word_char(chars[j]) {
                    j += 1;
                } else if is_joiner(chars[j]) && chars.get(j + 1).is_some_and(|&n| is_word_char(n)) {
                    j += 2;
                } else {
                    break;
                }
            }
            out.push(chars[i..j].iter().collect::<String>().to_lowercase());
            i = j;
            continue;
        }
        out.push(c.to_lowercase().collect());
        i += 1;
    }
    out
}

fn url_end(chars: &[char], i: usize) -> Option<usize> {
    let rest: String = chars[i..chars.len().min(i + 8)].iter().collect();
    let rest = rest.to_ascii_lowercase();
    if !URL_PREFIXES.iter().any(|p| rest.starts_with(p)) {
        return None;
    }
    let mut j = i;
    while j < chars.len() && !chars[j].is_whitespace() {
        j += 1;
    }
    Some(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_split() {
        assert_eq!(
            tokenize("Wir wollen keine Russen hier!"),
            ["wir", "wollen", "keine", "russen", "hier", "!"]
        );
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \n").is_empty());
    }

    #[test]
    fn mentions_hashtags_and_urls_stay_whole() {
        assert_eq!(tokenize("@user Danke!"), ["@user", "danke", "!"]);
        assert_eq!(
            tokenize("#Islamisierung sendet im #Scharia-Modus"),
            ["#islamisierung", "sendet", "im", "#scharia", "-", "modus"]
        );
        assert_eq!(
            tokenize("Siehe https://Example.org/a?b=1."),
            ["siehe", "https://example.org/a?b=1", "."]
        );
    }

    #[test]
    fn hyphens_and_apostrophes_inside_words() {
        assert_eq!(tokenize("Holocaust-Leugner don't"), ["holocaust-leugner", "don't"]);
        assert_eq!(tokenize("BRAVO !!!"), ["bravo", "!", "!", "!"]);
        assert_eq!(tokenize("63-Jährige."), ["63-jährige", "."]);
    }
}
