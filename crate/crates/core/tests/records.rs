use forumlm::bpe::{train_bpe, Vocabulary};
use forumlm::exec::Execution;
use forumlm::format::{read_record_file, render_thread, write_record_file, RecordFormatter};
use forumlm::thread::{parse_thread_file, write_thread_file, ForumPath, ForumThread, Post};
use proptest::prelude::*;

const THREADS: &str = include_str!("fixtures/reference_threads.jsonl");
const EXPECTED: &str = include_str!("fixtures/reference_records.txt");

#[test]
fn reference_threads_render_byte_exact() {
    let threads = parse_thread_file(THREADS.as_bytes()).unwrap();
    let vocab = Vocabulary::byte_level();
    let formatted = RecordFormatter::new(&vocab, 10_000).format_corpus(&threads, Execution::Sequential);
    assert!(formatted.warnings.is_empty());
    assert_eq!(formatted.records.len(), threads.len());
    assert_eq!(write_record_file(&formatted.records), EXPECTED);
}

#[test]
fn thread_file_round_trips() {
    let threads = parse_thread_file(THREADS.as_bytes()).unwrap();
    let again = parse_thread_file(write_thread_file(&threads).as_bytes()).unwrap();
    assert_eq!(threads, again);
}

#[test]
fn split_threads_repeat_the_header() {
    let threads = parse_thread_file(THREADS.as_bytes()).unwrap();
    let vocab = Vocabulary::byte_level();
    let formatted = RecordFormatter::new(&vocab, 400).format_thread(0, &threads[0]);
    assert!(formatted.records.len() > 1);
    for r in &formatted.records {
        assert!(r
            .text
            .starts_with("Dator och IT > Hårdvara: PC\nLuft eller vattenkylning till cpu\n\n[user"));
        assert!(r.token_count <= 400);
    }
    // labels stay stable across parts of the same thread
    assert!(formatted.records.last().unwrap().text.contains("[user3]:\nEn vettig"));
}

#[test]
fn record_file_reads_back() {
    assert_eq!(read_record_file(EXPECTED).len(), 4);
    let first = &read_record_file(EXPECTED)[0];
    assert!(first.ends_with("Få en tyst dator?"));
}

fn arb_thread() -> impl Strategy<Value = ForumThread> {
    let body = "[a-zåäö .?!\n]{1,300}";
    (
        prop::collection::vec("[A-Za-zå ]{1,12}", 1..3),
        "[a-z ]{1,40}",
        prop::collection::vec(
            (0..5usize, body, prop::option::of((0..5usize, "[a-z \n]{1,120}"))),
            1..12,
        ),
    )
        .prop_map(|(forum, title, posts)| {
            let posts = posts
                .into_iter()
                .map(|(a, body, q)| {
                    let p = Post::new(format!("u{a}"), if body.trim().is_empty() { "x".into() } else { body });
                    match q {
                        Some((qa, text)) => p.with_quote(format!("u{qa}"), text),
                        None => p,
                    }
                })
                .collect();
            ForumThread::new(ForumPath::new(forum).unwrap(), title, posts).unwrap()
        })
}

fn small_vocab() -> Vocabulary {
    let corpus = ["[user1]:\nhej hallå\n\n[user2]:\nCitat: [user1]\n        hej\nvad är det här?"; 4];
    train_bpe(&corpus, 300, Execution::Sequential).unwrap().vocab
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_respect_budget(thread in arb_thread(), budget in 40usize..400) {
        let vocab = small_vocab();
        let formatted = RecordFormatter::new(&vocab, budget).format_thread(0, &thread);
        for r in &formatted.records {
            prop_assert!(vocab.count_tokens(&r.text) <= budget);
            prop_assert_eq!(vocab.count_tokens(&r.text), r.token_count);
        }
    }

    #[test]
    fn unsplit_thread_matches_full_rendering(thread in arb_thread()) {
        let vocab = Vocabulary::byte_level();
        let formatted = RecordFormatter::new(&vocab, 1_000_000).format_thread(0, &thread);
        prop_assert_eq!(formatted.records.len(), 1);
        prop_assert_eq!(&formatted.records[0].text, &render_thread(&thread));
    }

    #[test]
    fn sequential_and_parallel_agree(threads in prop::collection::vec(arb_thread(), 1..8)) {
        let vocab = small_vocab();
        let f = RecordFormatter::new(&vocab, 120);
        prop_assert_eq!(f.format_corpus(&threads, Execution::Sequential), f.format_corpus(&threads, Execution::default()));
    }
}
