use lmstack_core::data::{
    decode, encode, ngrams, sample_batch, stage_preset, Component, Corpus, NGramIndex, Stage, COMMON_USAGE_THRESHOLD,
};
use lmstack_core::SeedTree;
use proptest::prelude::*;

const BENCH: &str = "the quick brown fox jumps over the lazy dog";

#[test]
fn sub_threshold_six_gram_drops() {
    let mut idx = NGramIndex::new();
    idx.insert(b"quick brown fox jumps over the", 3).unwrap();
    let d = idx.decontaminate(b"today a quick brown fox jumps over the fence", COMMON_USAGE_THRESHOLD);
    assert!(d.drop);
    assert_eq!(d.matches, vec![(b"quick brown fox jumps over the".to_vec(), 3)]);
}

#[test]
fn common_usage_six_gram_is_exempt() {
    let mut idx = NGramIndex::new();
    idx.insert(b"quick brown fox jumps over the", 1000).unwrap();
    let d = idx.decontaminate(b"today a quick brown fox jumps over the fence", COMMON_USAGE_THRESHOLD);
    assert!(!d.drop);
    assert_eq!(d.matches.len(), 1);
}

#[test]
fn three_gram_overlap_is_kept() {
    let idx = NGramIndex::build([BENCH.as_bytes()], []);
    let d = idx.decontaminate(b"a quick brown fox appeared, then the lazy dog slept", COMMON_USAGE_THRESHOLD);
    assert!(!d.drop);
    assert!(d.matches.is_empty());
    assert!(idx.decontaminate(b"x y the quick brown fox z", COMMON_USAGE_THRESHOLD).drop);
}

#[test]
fn window_range_is_four_to_thirteen() {
    let words: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
    let bench = words.join(" ");
    let idx = NGramIndex::build([bench.as_bytes()], []);
    // 13 consecutive benchmark words; every match is 4..=13 words long.
    let doc = words[5..18].join(" ");
    let d = idx.decontaminate(doc.as_bytes(), COMMON_USAGE_THRESHOLD);
    assert!(d.drop);
    let lens: Vec<usize> = d.matches.iter().map(|(g, _)| g.split(|b| *b == b' ').count()).collect();
    assert_eq!(*lens.iter().min().unwrap(), 4);
    assert_eq!(*lens.iter().max().unwrap(), 13);
    assert!(NGramIndex::new().insert(b"only three words", 1).is_err());
}

#[test]
fn corpus_counts_come_from_training_documents() {
    let corpus: Vec<String> = (0..1200).map(|i| format!("doc {i} the quick brown fox jumps")).collect();
    let idx = NGramIndex::build([BENCH.as_bytes()], corpus.iter().map(|s| s.as_bytes()));
    assert_eq!(idx.count(b"the quick brown fox jumps"), Some(1200));
    assert_eq!(idx.count(b"over the lazy dog"), Some(1));
    let d = idx.decontaminate(b"so the quick brown fox jumps high", COMMON_USAGE_THRESHOLD);
    assert!(!d.drop, "only common-usage n-grams shared");
}

#[test]
fn empty_benchmark_drops_nothing() {
    let idx = NGramIndex::build(std::iter::empty::<&[u8]>(), []);
    let c = Corpus::synthesize(&[Component::Web, Component::Qa], 20, &SeedTree::new(1), "train").unwrap();
    assert!(c.documents().all(|d| !idx.decontaminate(&d.text, COMMON_USAGE_THRESHOLD).drop));
}

#[test]
fn index_file_round_trip() {
    let idx = NGramIndex::build([BENCH.as_bytes(), b"one two three four five".as_slice()], []);
    let mut buf = Vec::new();
    idx.write_to(&mut buf).unwrap();
    assert_eq!(NGramIndex::read_from(buf.as_slice()).unwrap(), idx);
    buf[0] = b'Z';
    assert!(NGramIndex::read_from(buf.as_slice()).is_err());
}

fn word_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..24).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn tokenizer_round_trips(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(decode(&encode(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn growing_the_index_never_keeps_a_dropped_doc(
        bench in word_text(), extra in word_text(), doc in word_text(), count in 1u64..2000,
    ) {
        let small = NGramIndex::build([bench.as_bytes()], []);
        let mut big = small.clone();
        for g in ngrams(extra.as_bytes()) {
            if small.count(&g).is_none() {
                big.insert(&g, count).unwrap();
            }
        }
        let before = small.decontaminate(doc.as_bytes(), COMMON_USAGE_THRESHOLD).drop;
        let after = big.decontaminate(doc.as_bytes(), COMMON_USAGE_THRESHOLD).drop;
        prop_assert!(!before || after);
    }

    #[test]
    fn mixture_sampling_is_reproducible(seed in any::<u64>()) {
        let seeds = SeedTree::new(seed);
        let corpus = Corpus::synthesize(
            &["web", "qa", "copy", "math", "code"].map(|t| Component::from_tag(t).unwrap()), 8, &seeds, "train",
        ).unwrap();
        let m = stage_preset(Stage::Core).mixture;
        let a = sample_batch(&corpus, &m, 48, 3, &mut seeds.stream("batch", 0)).unwrap();
        let b = sample_batch(&corpus, &m, 48, 3, &mut seeds.stream("batch", 0)).unwrap();
        prop_assert_eq!(a, b);
    }
}
