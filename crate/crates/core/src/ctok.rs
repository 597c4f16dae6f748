//! Lexer for un-preprocessed C source.
//!
//! Produces one [`Token`] per lexeme with its 1-based source line. Comments
//! are dropped, string and character literals stay whole, multi-character
//! operators are single punctuators, and every token of a preprocessor
//! directive line is flagged [`TokenKind::Preprocessor`].
//!
//! [`detokenize`] joins lexemes with single spaces. The only guarantee is
//! that re-lexing the rendering yields the same lexeme sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Identifier,
    Keyword,
    Number,
    StringLiteral,
    CharLiteral,
    Punctuator,
    Preprocessor,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    pub line: u32,
}

/// An ordered run of tokens, usually one file or one function.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
}

impl TokenStream {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lexemes(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    pub fn lexemes_eq(&self, other: &TokenStream) -> bool {
        self.len() == other.len()
            && self
                .tokens
                .iter()
                .zip(&other.tokens)
                .all(|(a, b)| a.text == b.text)
    }

    /// Sub-stream of tokens `range`, keeping line provenance.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenStream {
        TokenStream::new(self.tokens[range].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated string literal starting on line {line}")]
    UnterminatedString { line: u32 },
    #[error("unterminated character literal starting on line {line}")]
    UnterminatedChar { line: u32 },
    #[error("unterminated block comment starting on line {line}")]
    UnterminatedComment { line: u32 },
}

impl LexError {
    pub fn line(&self) -> u32 {
        match *self {
            LexError::UnterminatedString { line }
            | LexError::UnterminatedChar { line }
            | LexError::UnterminatedComment { line } => line,
        }
    }
}

const KEYWORDS: &[&str] = &[
    "auto",
    "break",
    "case",
    "char",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extern",
    "float",
    "for",
    "goto",
    "if",
    "inline",
    "int",
    "long",
    "register",
    "restrict",
    "return",
    "short",
    "signed",
    "sizeof",
    "static",
    "struct",
    "switch",
    "typedef",
    "union",
    "unsigned",
    "void",
    "volatile",
    "while",
    "_Alignas",
    "_Alignof",
    "_Atomic",
    "_Bool",
    "_Complex",
    "_Generic",
    "_Imaginary",
    "_Noreturn",
    "_Static_assert",
    "_Thread_local",
];

// Longest first within each leading character so maximal munch is a linear scan.
const PUNCTUATORS: &[&str] = &[
    "%:%:", "...", "<<=", ">>=", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||",
    "*=", "/=", "%=", "+=", "-=", "&=", "^=", "|=", "##", "<:", ":>", "<%", "%>", "%:", "[", "]",
    "(", ")", "{", "}", ".", "&", "*", "+", "-", "~", "!", "/", "%", "<", ">", "^", "|", "?", ":",
    ";", "=", ",", "#",
];

pub fn is_keyword(text: &str) -> bool {
    KEYWORDS.contains(&text)
}

fn is_ident_start(c: char) -> bool {
    c == '_' || c == '$' || c.is_alphabetic() || (!c.is_ascii() && !c.is_whitespace())
}

fn is_ident_continue(c: char) -> bool {
    is_ident_start(c) || c.is_ascii_digit()
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    line: u32,
    tokens: Vec<Token>,
    // true while the current logical line is a preprocessor directive
    in_directive: bool,
    // true until the first token of the current physical line is seen
    at_line_start: bool,
}

impl Lexer {
    fn new(src: &str) -> Self {
        Self {
            chars: src.chars().collect(),
            pos: 0,
            line: 1,
            tokens: Vec::new(),
            in_directive: false,
            at_line_start: true,
        }
    }

    fn peek(&self, ahead: usize) -> Option<char> {
        let mut i = self.pos;
        let mut remaining = ahead;
        loop {
            // skip line splices transparently
            while self.splice_at(i) > 0 {
                i += self.splice_at(i);
            }
            let c = *self.chars.get(i)?;
            if remaining == 0 {
                return Some(c);
            }
            remaining -= 1;
            i += 1;
        }
    }

    /// Length of a backslash-newline splice starting at `i`, 0 if none.
    fn splice_at(&self, i: usize) -> usize {
        if self.chars.get(i) != Some(&'\\') {
            return 0;
        }
        match (self.chars.get(i + 1), self.chars.get(i + 2)) {
            (Some('\n'), _) => 2,
            (Some('\r'), Some('\n')) => 3,
            _ => 0,
        }
    }

    fn bump(&mut self) -> Option<char> {
        self.skip_splices();
        let c = *self.chars.get(self.pos)?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
        }
        Some(c)
    }

    fn push(&mut self, text: String, kind: TokenKind, line: u32) {
        let kind = if self.in_directive {
            TokenKind::Preprocessor
        } else {
            kind
        };
        self.tokens.push(Token { text, kind, line });
        self.at_line_start = false;
    }

    fn skip_splices(&mut self) {
        loop {
            let n = self.splice_at(self.pos);
            if n == 0 {
                break;
            }
            self.pos += n;
            self.line += 1;
        }
    }

    fn run(mut self) -> Result<Vec<Token>, LexError> {
        while let Some(c) = self.peek(0) {
            self.skip_splices();
            if c == '\n' {
                self.bump();
                self.in_directive = false;
                self.at_line_start = true;
                continue;
            }
            if c.is_whitespace() {
                self.bump();
                continue;
            }
            if c == '/' && self.peek(1) == Some('/') {
                while let Some(c) = self.peek(0) {
                    if c == '\n' {
                        break;
                    }
                    self.bump();
                }
                continue;
            }
            if c == '/' && self.peek(1) == Some('*') {
                let line = self.line;
                self.bump();
                self.bump();
                loop {
                    match self.bump() {
                        None => return Err(LexError::UnterminatedComment { line }),
                        Some('*') if self.peek(0) == Some('/') => {
                            self.bump();
                            break;
                        }
                        Some(_) => {}
                    }
                }
                continue;
            }
            let line = self.line;
            if c == '#' && self.at_line_start {
                self.in_directive = true;
            }
            if c == '"' {
                let text = self.quoted('"', String::new(), line)?;
                self.push(text, TokenKind::StringLiteral, line);
            } else if c == '\'' {
                let text = self.quoted('\'', String::new(), line)?;
                self.push(text, TokenKind::CharLiteral, line);
            } else if c == '<' && self.after_include() {
                if let Some(text) = self.header_name() {
                    self.push(text, TokenKind::StringLiteral, line);
                } else {
                    self.punctuator(line);
                }
            } else if is_ident_start(c) {
                let mut text = String::new();
                while let Some(c) = self.peek(0) {
                    if !is_ident_continue(c) {
                        break;
                    }
                    text.push(c);
                    self.bump();
                }
                // encoding prefixes glue onto the following literal
                let prefix = matches!(text.as_str(), "L" | "u" | "U" | "u8");
                match self.peek(0) {
                    Some(q @ ('"' | '\'')) if prefix => {
                        let kind = if q == '"' {
                            TokenKind::StringLiteral
                        } else {
                            TokenKind::CharLiteral
                        };
                        let text = self.quoted(q, text, line)?;
                        self.push(text, kind, line);
                    }
                    _ => {
                        let kind = if is_keyword(&text) {
                            TokenKind::Keyword
                        } else {
                            TokenKind::Identifier
                        };
                        self.push(text, kind, line);
                    }
                }
            } else if c.is_ascii_digit()
                || (c == '.' && self.peek(1).is_some_and(|d| d.is_ascii_digit()))
            {
                let text = self.pp_number();
                self.push(text, TokenKind::Number, line);
            } else {
                self.punctuator(line);
            }
        }
        Ok(self.tokens)
    }

    fn after_include(&self) -> bool {
        let n = self.tokens.len();
        n >= 2 && self.tokens[n - 1].text == "include" && self.tokens[n - 2].text == "#"
    }

    fn header_name(&mut self) -> Option<String> {
        let mut i = 1;
        let mut text = String::from("<");
        loop {
            let c = self.peek(i)?;
            if c.is_whitespace() {
                return None;
            }
            text.push(c);
            if c == '>' {
                break;
            }
            i += 1;
        }
        for _ in 0..=i {
            self.bump();
        }
        Some(text)
    }

    fn quoted(&mut self, quote: char, mut text: String, line: u32) -> Result<String, LexError> {
        let unterminated = || {
            if quote == '"' {
                LexError::UnterminatedString { line }
            } else {
                LexError::UnterminatedChar { line }
            }
        };
        text.push(self.bump().expect("caller peeked the opening quote"));
        loop {
            match self.peek(0) {
                None | Some('\n') => return Err(unterminated()),
                Some('\\') => {
                    text.push('\\');
                    self.bump();
                    match self.peek(0) {
                        None | Some('\n') => return Err(unterminated()),
                        Some(c) => {
                            text.push(c);
                            self.bump();
                        }
                    }
                }
                Some(c) => {
                    text.push(c);
                    self.bump();
                    if c == quote {
                        return Ok(text);
                    }
                }
            }
        }
    }

    fn pp_number(&mut self) -> String {
        let mut text = String::new();
        while let Some(c) = self.peek(0) {
            if matches!(c, 'e' | 'E' | 'p' | 'P') && matches!(self.peek(1), Some('+' | '-')) {
                text.push(c);
                self.bump();
                text.push(self.bump().unwrap());
            } else if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                text.push(c);
                self.bump();
            } else {
                break;
            }
        }
        text
    }

    fn punctuator(&mut self, line: u32) {
        for p in PUNCTUATORS {
            let matches = p
                .chars()
                .enumerate()
                .all(|(i, pc)| self.peek(i) == Some(pc));
            if matches {
                for _ in 0..p.chars().count() {
                    self.bump();
                }
                self.push((*p).to_string(), TokenKind::Punctuator, line);
                return;
            }
        }
        // stray character such as '@' or '`'
        let c = self.bump().unwrap();
        self.push(c.to_string(), TokenKind::Punctuator, line);
    }
}

pub fn tokenize(source: &str) -> Result<TokenStream, LexError> {
    Lexer::new(source).run().map(TokenStream::new)
}

pub fn detokenize(stream: &TokenStream) -> String {
    join_lexemes(stream.tokens.iter().map(|t| t.text.as_str()))
}

pub fn join_lexemes<'a>(lexemes: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for (i, l) in lexemes.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(src: &str) -> Vec<String> {
        tokenize(src).unwrap().lexemes()
    }

    #[test]
    fn simple_declaration() {
        assert_eq!(lex("int a=0;"), ["int", "a", "=", "0", ";"]);
    }

    #[test]
    fn comments_are_removed() {
        assert_eq!(lex("/*c*/ x++;"), ["x", "++", ";"]);
        assert_eq!(lex("x // tail\n+ y"), ["x", "+", "y"]);
    }

    #[test]
    fn detokenize_joins_with_single_spaces() {
        let s = tokenize("int a=0;").unwrap();
        assert_eq!(detokenize(&s), "int a = 0 ;");
        assert_eq!(detokenize(&TokenStream::default()), "");
    }

    #[test]
    fn maximal_munch_operators() {
        assert_eq!(lex("a<<=b->c"), ["a", "<<=", "b", "->", "c"]);
        assert_eq!(lex("a+++b"), ["a", "++", "+", "b"]);
        assert_eq!(lex("f(...)"), ["f", "(", "...", ")"]);
        assert_eq!(lex("x>=y!=z"), ["x", ">=", "y", "!=", "z"]);
    }

    #[test]
    fn literals_stay_whole() {
        assert_eq!(
            lex(r#"s = "a \"b\" c"; c = '\'';"#),
            ["s", "=", r#""a \"b\" c""#, ";", "c", "=", r"'\''", ";"]
        );
        assert_eq!(lex(r#"L"wide" u8"x""#), [r#"L"wide""#, r#"u8"x""#]);
        assert_eq!(lex("1.5e+10f 0x1p-3 .5 10UL"), ["1.5e+10f", "0x1p-3", ".5", "10UL"]);
    }

    #[test]
    fn kinds_and_lines() {
        let s = tokenize("int x;\nreturn \"s\";").unwrap();
        let kinds: Vec<_> = s.tokens.iter().map(|t| t.kind).collect();
        assert_eq!(
            kinds,
            [
                TokenKind::Keyword,
                TokenKind::Identifier,
                TokenKind::Punctuator,
                TokenKind::Keyword,
                TokenKind::StringLiteral,
                TokenKind::Punctuator
            ]
        );
        let lines: Vec<_> = s.tokens.iter().map(|t| t.line).collect();
        assert_eq!(lines, [1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn preprocessor_lines_are_flagged() {
        let s = tokenize("#include <stdio.h>\n#define N 10\nint a;").unwrap();
        assert_eq!(
            s.lexemes(),
            ["#", "include", "<stdio.h>", "#", "define", "N", "10", "int", "a", ";"]
        );
        assert!(s.tokens[..7]
            .iter()
            .all(|t| t.kind == TokenKind::Preprocessor));
        assert_eq!(s.tokens[7].kind, TokenKind::Keyword);
    }

    #[test]
    fn line_splice_continues_directive() {
        let s = tokenize("#define M(a) \\\n  (a+1)\nint b;").unwrap();
        let pp = s
            .tokens
            .iter()
            .filter(|t| t.kind == TokenKind::Preprocessor)
            .count();
        assert_eq!(pp, 11);
        assert_eq!(s.tokens.last().unwrap().line, 3);
    }

    #[test]
    fn unterminated_errors_name_the_line() {
        assert_eq!(
            tokenize("int a;\nchar *s = \"oops;\n").unwrap_err(),
            LexError::UnterminatedString { line: 2 }
        );
        assert_eq!(
            tokenize("a;\n\n/* never closed").unwrap_err(),
            LexError::UnterminatedComment { line: 3 }
        );
        assert_eq!(tokenize("c = 'x").unwrap_err().line(), 1);
    }

    #[test]
    fn header_name_round_trips_mid_line() {
        let s = tokenize("#include <sys/types.h>\nint x;").unwrap();
        let again = tokenize(&detokenize(&s)).unwrap();
        assert!(s.lexemes_eq(&again));
    }

    #[test]
    fn stray_characters_become_single_tokens() {
        assert_eq!(lex("a @ b"), ["a", "@", "b"]);
    }
}
