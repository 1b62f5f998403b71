use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forumlm::bpe::{Vocabulary, RECORD_TOKEN};
use forumlm::decode::DecodeConfig;
use forumlm::format::{render_thread, RecordFormatter};
use forumlm::lm::train_ngram;
use forumlm::thread::{ForumPath, ForumThread, Post};
use forumlm::{generate_many, train_bpe, Execution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 24] = [
    "jag",
    "du",
    "det",
    "är",
    "inte",
    "och",
    "att",
    "som",
    "har",
    "kan",
    "men",
    "så",
    "tror",
    "bättre",
    "dator",
    "bil",
    "resa",
    "pris",
    "fråga",
    "svar",
    "någon",
    "kanske",
    "överklockning",
    "semester",
];

fn corpus(threads: usize) -> Vec<ForumThread> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..threads)
        .map(|i| {
            let posts = (0..rng.gen_range(2..8))
                .map(|p| {
                    let len = rng.gen_range(5..60);
                    let body: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
                    Post::new(format!("medlem{}", p % 3), body.join(" "))
                })
                .collect();
            let path = ForumPath::new(vec![format!("Forum {}", i % 12), "Allmänt".into()]).unwrap();
            ForumThread::new(path, format!("Tråd {i}"), posts).unwrap()
        })
        .collect()
}

fn strategies() -> Vec<(&'static str, Execution)> {
    #[allow(unused_mut)]
    let mut v = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Execution::Parallel));
    v
}

fn bench_train_bpe(c: &mut Criterion) {
    let texts: Vec<String> = corpus(300).iter().map(render_thread).collect();
    let mut group = c.benchmark_group("train_bpe");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::new(name, 400), |b| {
            b.iter(|| train_bpe(&texts, 400, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_format(c: &mut Criterion) {
    let threads = corpus(2000);
    let texts: Vec<String> = threads[..200].iter().map(render_thread).collect();
    let vocab = train_bpe(&texts, 400, Execution::default()).unwrap().vocab;
    let formatter = RecordFormatter::new(&vocab, 128);
    let mut group = c.benchmark_group("format_corpus");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::new(name, threads.len()), |b| {
            b.iter(|| formatter.format_corpus(&threads, exec))
        });
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let vocab = Vocabulary::byte_level();
    let records: Vec<_> = corpus(300).iter().map(|t| vocab.encode(&render_thread(t))).collect();
    let model = train_ngram(&records, vocab.size(), 4, 0.01, Some(RECORD_TOKEN)).unwrap();
    let context = vocab.encode("Forum 1 > Allmänt\nTråd 1\n\n[user1]:\njag tror det\n\n[user2]:\n");
    let config = DecodeConfig {
        beam_size: 4,
        max_new_tokens: 60,
        ..DecodeConfig::default()
    };
    let seeds: Vec<u64> = (0..32).collect();
    let mut group = c.benchmark_group("generate_many");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::new(name, seeds.len()), |b| {
            b.iter(|| generate_many(&model, &vocab, &context, &config, &seeds, exec))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_train_bpe, bench_format, bench_generate);
criterion_main!(benches);
