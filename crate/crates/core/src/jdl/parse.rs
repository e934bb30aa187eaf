use super::{JdlDocument, JdlError, JdlValue};

/// Parses JDL text.
///
/// Typographic double quotes and en/em dashes are folded to ASCII first, so
/// text copied out of typeset documents parses. `#` starts a comment that
/// runs to the end of the line (outside quoted strings).
pub fn parse_jdl(text: &str) -> Result<JdlDocument, JdlError> {
    let chars: Vec<char> = text.chars().map(normalize).collect();
    let mut parser = Parser { chars, pos: 0 };
    let mut doc = JdlDocument::new();
    loop {
        parser.skip_trivia();
        if parser.at_end() {
            return Ok(doc);
        }
        let (name, value) = parser.statement()?;
        if doc.contains(&name) {
            return Err(JdlError::DuplicateAttribute(name));
        }
        doc.attributes.push((name, value));
    }
}

fn normalize(c: char) -> char {
    match c {
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' => '"',
        '\u{2013}' | '\u{2014}' => '-',
        c => c,
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn at_end(&self) -> bool {
        self.pos >= self.chars.len()
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn error(&self, at: usize, expected: &str) -> JdlError {
        let mut line = 1;
        let mut column = 1;
        for &c in &self.chars[..at.min(self.chars.len())] {
            if c == '\n' {
                line += 1;
                column = 1;
            } else {
                column += 1;
            }
        }
        JdlError::Syntax {
            line,
            column,
            expected: expected.to_string(),
        }
    }

    fn skip_comment(&mut self) {
        while let Some(c) = self.peek() {
            if c == '\n' {
                break;
            }
            self.pos += 1;
        }
    }

    fn skip_trivia(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += 1;
            } else if c == '#' {
                self.skip_comment();
            } else {
                break;
            }
        }
    }

    fn expect(&mut self, want: char, expected: &str) -> Result<(), JdlError> {
        if self.peek() == Some(want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(self.pos, expected))
        }
    }

    fn statement(&mut self) -> Result<(String, JdlValue), JdlError> {
        let name = self.identifier()?;
        self.skip_trivia();
        self.expect('=', "`=`")?;
        self.skip_trivia();
        let value = self.value(&name)?;
        Ok((name, value))
    }

    fn identifier(&mut self) -> Result<String, JdlError> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.pos += 1,
            _ => return Err(self.error(start, "attribute name")),
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }

    /// Parses a value and consumes the terminating `;`.
    fn value(&mut self, name: &str) -> Result<JdlValue, JdlError> {
        let start = self.pos;
        match self.peek() {
            Some('"') => {
                let s = self.quoted()?;
                self.skip_trivia();
                if self.peek() == Some(';') {
                    self.pos += 1;
                    return Ok(JdlValue::String(s));
                }
                // Something like `"a" == other.X`: an expression after all.
                self.pos = start;
                self.raw_value(name)
            }
            Some('{') => {
                self.pos += 1;
                let items = self.list_items()?;
                self.skip_trivia();
                self.expect(';', "`;`")?;
                Ok(JdlValue::StringList(items))
            }
            _ => self.raw_value(name),
        }
    }

    fn quoted(&mut self) -> Result<String, JdlError> {
        let open = self.pos;
        self.expect('"', "`\"`")?;
        let mut out = String::new();
        loop {
            match self.peek() {
                None | Some('\n') => return Err(self.error(open, "closing `\"`")),
                Some('"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some('\\') => {
                    self.pos += 1;
                    match self.peek() {
                        Some(c @ ('"' | '\\')) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        _ => out.push('\\'),
                    }
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }

    fn list_items(&mut self) -> Result<Vec<String>, JdlError> {
        let mut items = Vec::new();
        self.skip_trivia();
        if self.peek() == Some('}') {
            self.pos += 1;
            return Ok(items);
        }
        loop {
            self.skip_trivia();
            if self.peek() != Some('"') {
                return Err(self.error(self.pos, "quoted list element"));
            }
            items.push(self.quoted()?);
            self.skip_trivia();
            match self.peek() {
                Some(',') => self.pos += 1,
                Some('}') => {
                    self.pos += 1;
                    return Ok(items);
                }
                _ => return Err(self.error(self.pos, "`,` or `}`")),
            }
        }
    }

    /// Unquoted value text up to the next `;` outside quotes.
    fn raw_value(&mut self, name: &str) -> Result<JdlValue, JdlError> {
        let start = self.pos;
        let mut raw = String::new();
        let mut in_string = false;
        let mut string_open = 0;
        loop {
            let Some(c) = self.peek() else {
                let at = if in_string { string_open } else { start };
                let expected = if in_string { "closing `\"`" } else { "`;`" };
                return Err(self.error(at, expected));
            };
            if in_string {
                raw.push(c);
                self.pos += 1;
                match c {
                    '\\' => {
                        if let Some(next) = self.peek() {
                            raw.push(next);
                            self.pos += 1;
                        }
                    }
                    '"' => in_string = false,
                    '\n' => return Err(self.error(string_open, "closing `\"`")),
                    _ => {}
                }
                continue;
            }
            match c {
                ';' => {
                    self.pos += 1;
                    break;
                }
                '#' => self.skip_comment(),
                '"' => {
                    in_string = true;
                    string_open = self.pos;
                    raw.push(c);
                    self.pos += 1;
                }
                _ => {
                    raw.push(c);
                    self.pos += 1;
                }
            }
        }
        let text = raw.trim();
        if text.is_empty() {
            return Err(self.error(start, "value"));
        }
        if name == "Arguments" && !text.starts_with('"') {
            return Ok(JdlValue::TokenRun(
                text.split_whitespace().map(str::to_string).collect(),
            ));
        }
        if let Ok(n) = text.parse::<i64>() {
            return Ok(JdlValue::Number(n));
        }
        Ok(JdlValue::Expression(text.to_string()))
    }
}
