//! A separable toy corpus: every label-1 function contains one planted
//! unbounded copy, label-0 functions never do.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CodeSnippet, DatasetSplit};

pub const PLANTED_LINE: &str = "    strcpy(buf, input);";

const FILLER: &[&str] = &[
    "    int n = 0;",
    "    n += 1;",
    "    if (len > 0) {",
    "    }",
    "    i++;",
    "    x = y * 2;",
    "    total += buf[i];",
    "    return n;",
    "    len--;",
    "    flag = 1;",
    "    count = count + n;",
    "    y = x - 1;",
];

const NAMES: &[&str] = &[
    "parse",
    "read_hdr",
    "copy_name",
    "handle",
    "decode",
    "fill",
    "update",
    "scan",
];

fn snippet(id: u64, label: u8, rng: &mut ChaCha8Rng) -> CodeSnippet {
    let body_len = rng.random_range(4..=10);
    let mut body: Vec<String> = (0..body_len)
        .map(|_| (*FILLER.choose(rng).unwrap()).to_owned())
        .collect();
    let at = rng.random_range(0..=body.len());
    body.insert(
        at,
        if label == 1 {
            PLANTED_LINE.to_owned()
        } else {
            (*FILLER.choose(rng).unwrap()).to_owned()
        },
    );
    let name = NAMES.choose(rng).unwrap();
    let mut code = format!("static int {name}(char *input, int len)\n{{\n    char buf[16];\n");
    for line in body {
        code.push_str(&line);
        code.push('\n');
    }
    code.push_str("}\n");
    CodeSnippet { id, code, label }
}

/// `n` snippets with ids starting at `first_id`, half of each label, shuffled.
pub fn generate(n: usize, first_id: u64, rng: &mut ChaCha8Rng) -> Vec<CodeSnippet> {
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| snippet(first_id + i as u64, label, rng))
        .collect()
}

/// Train/valid/test sets of the given sizes with disjoint ids.
pub fn synthetic_split(train: usize, valid: usize, test: usize, seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tr = generate(train, 0, &mut rng);
    let va = generate(valid, train as u64, &mut rng);
    let te = generate(test, (train + valid) as u64, &mut rng);
    DatasetSplit {
        train: tr,
        valid: va,
        test: te,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_line_marks_label() {
        let split = synthetic_split(64, 16, 16, 123456);
        for s in split.train.iter().chain(&split.valid).chain(&split.test) {
            assert_eq!(s.code.contains(PLANTED_LINE), s.label == 1, "{}", s.code);
        }
        assert_eq!(split.train.iter().filter(|s| s.label == 1).count(), 32);
        assert_eq!(split.test.iter().filter(|s| s.label == 1).count(), 8);
        let mut ids: Vec<u64> = split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .map(|s| s.id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 96);
    }

    #[test]
    fn deterministic() {
        assert_eq!(synthetic_split(8, 2, 2, 7), synthetic_split(8, 2, 2, 7));
        assert_ne!(synthetic_split(8, 2, 2, 7), synthetic_split(8, 2, 2, 8));
    }
}
