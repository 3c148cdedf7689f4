use sha2::{Digest, Sha256};

use super::FlowRecord;

const DIGEST_CHARS: usize = 8;

/// First eight lowercase hex characters of `SHA-256("column=value")`.
pub fn field_digest(column: &str, value: &str) -> String {
    let mut h = Sha256::new();
    h.update(column.as_bytes());
    h.update(b"=");
    h.update(value.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(DIGEST_CHARS);
    for b in &digest[..DIGEST_CHARS / 2] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Space-joined per-field digests in column order; `9·F − 1` ASCII bytes.
pub fn hash_encode(record: &FlowRecord) -> String {
    let mut out = String::with_capacity(record.fields.len() * (DIGEST_CHARS + 1));
    for (i, (name, value)) in record.fields.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&field_digest(name, value));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(fields: &[(&str, &str)]) -> FlowRecord {
        FlowRecord {
            fields: fields
                .iter()
                .map(|&(k, v)| (k.into(), v.to_string()))
                .collect(),
            label: "Normal".into(),
        }
    }

    #[test]
    fn matches_reference_digests() {
        // Reference values from Python's hashlib.
        assert_eq!(hash_encode(&record(&[("proto", "tcp")])), "844958c8");
        assert_eq!(
            hash_encode(&record(&[("a", "1"), ("b", "2")])),
            "c22fea5d efa2eba7"
        );
    }

    #[test]
    fn length_and_alphabet() {
        for f in 1..6 {
            let fields: Vec<(String, String)> =
                (0..f).map(|i| (format!("c{i}"), format!("{i}"))).collect();
            let refs: Vec<(&str, &str)> = fields
                .iter()
                .map(|(a, b)| (a.as_str(), b.as_str()))
                .collect();
            let s = hash_encode(&record(&refs));
            assert_eq!(s.len(), 9 * f - 1);
            assert!(s
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b) || b == b' '));
        }
    }

    #[test]
    fn changes_stay_local_to_their_field() {
        let a = hash_encode(&record(&[("a", "1"), ("b", "2"), ("c", "x")]));
        let b = hash_encode(&record(&[("a", "1"), ("b", "3"), ("c", "x")]));
        assert_eq!(
            a,
            hash_encode(&record(&[("a", "1"), ("b", "2"), ("c", "x")]))
        );
        let blocks_a: Vec<&str> = a.split(' ').collect();
        let blocks_b: Vec<&str> = b.split(' ').collect();
        assert_eq!(blocks_a[0], blocks_b[0]);
        assert_eq!(blocks_a[2], blocks_b[2]);
        assert_eq!(blocks_b[1], "d20143f4");
        assert_ne!(blocks_a[1], blocks_b[1]);
    }
}
