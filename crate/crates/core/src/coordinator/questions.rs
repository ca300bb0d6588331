use rand::seq::SliceRandom;
use rand::Rng;

static BUNDLED: &str = include_str!("../../data/questions.txt");

/// Trivia prompts used for registration challenges and audit queries.
#[derive(Debug, Clone)]
pub struct QuestionBank {
    questions: Vec<String>,
}

impl QuestionBank {
    pub fn bundled() -> Self {
        Self::from_lines(BUNDLED)
    }

    pub fn from_lines(text: &str) -> Self {
        let questions = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        Self { questions }
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// A question plus an instruction to echo a fresh 16-hex-char marker,
    /// so no two challenges are ever identical.
    pub fn challenge(&self, rng: &mut impl Rng) -> (String, String) {
        let q = self.questions.choose(rng).map(String::as_str).unwrap_or("Say hello.");
        let nonce = format!("{:016x}", rng.gen::<u64>());
        (format!("{q} Begin your answer with the string \"{nonce}\"."), nonce)
    }
}
