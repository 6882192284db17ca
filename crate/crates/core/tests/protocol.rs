//! Wire protocol round trips and an oracle served over a socket.

use std::io::{BufReader, Read};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use proptest::prelude::*;
use reportree::agents::{
    protocol_decode, protocol_encode, run_evaluation, serve, AgentSpec, BuiltinKind, EvalOptions,
    ProtocolError, ProtocolMessage, WireHistory, MAX_LINE_BYTES,
};
use reportree::lexicon::{Corpus, Vocabulary};
use reportree::metrics::render_metrics_json;
use reportree::report::{populate_gold_reports, render_reports, StructuredReport};
use reportree::session::HistoryRole;
use reportree::template::{build_template, question_text, ChoiceMode, ReportTemplate};

fn history() -> impl Strategy<Value = WireHistory> {
    (
        any::<String>(),
        any::<String>(),
        prop_oneof![
            Just(HistoryRole::Ancestor),
            Just(HistoryRole::SiblingAttribute),
            Just(HistoryRole::PriorInstance)
        ],
    )
        .prop_map(|(q, a, role)| WireHistory { q, a, role })
}

fn message() -> impl Strategy<Value = ProtocolMessage> {
    let strings = || prop::collection::vec(any::<String>(), 0..4);
    prop_oneof![
        (any::<String>(), strings()).prop_map(|(template_fingerprint, answer_vocabulary)| {
            ProtocolMessage::Hello {
                template_fingerprint,
                answer_vocabulary,
            }
        }),
        (
            any::<u64>(),
            (any::<String>(), any::<String>(), any::<String>()),
            any::<u32>(),
            any::<bool>(),
            any::<String>(),
            prop::collection::vec(history(), 0..4),
            strings(),
            any::<bool>(),
        )
            .prop_map(
                |(
                    session_id,
                    (patient_id, image_ref, node_id),
                    instance_index,
                    is_followup,
                    text,
                    history,
                    valid_answers,
                    multi,
                )| {
                    ProtocolMessage::Question {
                        session_id,
                        patient_id,
                        image_ref,
                        node_id,
                        instance_index,
                        is_followup,
                        text,
                        history,
                        valid_answers,
                        choice_mode: if multi {
                            ChoiceMode::Multi
                        } else {
                            ChoiceMode::Single
                        },
                    }
                }
            ),
        (any::<u64>(), strings()).prop_map(|(session_id, selections)| ProtocolMessage::Answer {
            session_id,
            selections
        }),
        any::<u64>().prop_map(|session_id| ProtocolMessage::SessionEnd { session_id }),
        Just(ProtocolMessage::Shutdown {}),
        (any::<String>(), any::<String>())
            .prop_map(|(code, detail)| ProtocolMessage::Error { code, detail }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn encode_decode_round_trip(m in message()) {
        let line = protocol_encode(&m);
        prop_assert_eq!(line.last(), Some(&b'\n'));
        prop_assert_eq!(line.iter().filter(|&&b| b == b'\n').count(), 1);
        prop_assert_eq!(protocol_decode(&line).unwrap(), m);
    }

    #[test]
    fn truncation_reports_an_offset_inside_the_line(m in message(), cut in 0.0f64..1.0) {
        let line = protocol_encode(&m);
        let body = &line[..line.len() - 1];
        let n = ((body.len() as f64) * cut) as usize;
        match protocol_decode(&body[..n]) {
            Err(ProtocolError::Malformed { offset, .. }) | Err(ProtocolError::Utf8 { offset }) => {
                prop_assert!(offset <= n);
            }
            other => prop_assert!(false, "decoded a truncated line: {:?}", other),
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = protocol_decode(&bytes);
    }
}

#[test]
fn unknown_fields_are_ignored() {
    let line = br#"{"type":"answer","session_id":4,"selections":["yes"],"confidence":0.9,"extra":{"a":[1]}}"#;
    assert_eq!(
        protocol_decode(line).unwrap(),
        ProtocolMessage::Answer {
            session_id: 4,
            selections: vec!["yes".into()]
        }
    );
    assert!(matches!(
        protocol_decode(br#"{"type":"answer","session_id":4}"#),
        Err(ProtocolError::Malformed { .. })
    ));
    let big = vec![b' '; MAX_LINE_BYTES + 1];
    assert!(matches!(
        protocol_decode(&big),
        Err(ProtocolError::Oversized { .. })
    ));
}

const VOCAB: &str = "\
infiltrate,disease,respiratory system
opacity,sign,respiratory system
lung,anatomy,respiratory system
upper lobe,anatomy,respiratory system
left,attr_positional,
patchy,attr_descriptive,
mild,attr_degree,
severe,attr_degree,
catheter,object,
";

const CORPUS: &str = "\
p1 | a1 | infiltrate/lung/upper lobe/left/patchy/mild
p2 | b1,b2 | opacity/lung/mild;opacity/lung/severe;catheter
p3 | c1 | normal
p4 | d1 | infiltrate/lung/severe;opacity/lung
";

fn fixture() -> (ReportTemplate, Vec<StructuredReport>) {
    let c = Corpus::parse(CORPUS, Vocabulary::parse(VOCAB).unwrap()).unwrap();
    let t = build_template(&c).unwrap();
    let golds = populate_gold_reports(&t, &c).unwrap();
    (t, golds)
}

/// Copies everything read from the socket into `log`.
struct Tee<R> {
    inner: R,
    log: Arc<Mutex<Vec<u8>>>,
}

impl<R: Read> Read for Tee<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

/// Serves the oracle over TCP for `connections` clients; the handle yields
/// every byte each connection received.
fn tcp_oracle(
    t: &ReportTemplate,
    golds: &[StructuredReport],
    connections: usize,
) -> (String, thread::JoinHandle<Vec<Vec<u8>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let (t, golds) = (t.clone(), golds.to_vec());
    let handle = thread::spawn(move || {
        let servers: Vec<_> = (0..connections)
            .map(|_| {
                let (stream, _) = listener.accept().unwrap();
                let (t, golds) = (t.clone(), golds.clone());
                let log = Arc::new(Mutex::new(Vec::new()));
                let tee = Tee {
                    inner: stream.try_clone().unwrap(),
                    log: Arc::clone(&log),
                };
                let h = thread::spawn(move || {
                    serve(
                        &t,
                        BuiltinKind::Oracle,
                        &golds,
                        None,
                        BufReader::new(tee),
                        stream,
                    )
                    .unwrap()
                });
                (h, log)
            })
            .collect();
        servers
            .into_iter()
            .map(|(h, log)| {
                h.join().unwrap();
                Arc::try_unwrap(log).unwrap().into_inner().unwrap()
            })
            .collect()
    });
    (addr, handle)
}

#[test]
fn tcp_oracle_matches_builtin_and_sends_ancestor_history() {
    let (t, golds) = fixture();
    let builtin = run_evaluation(
        &t,
        &golds,
        &AgentSpec::Builtin(BuiltinKind::Oracle),
        &EvalOptions::default(),
    )
    .unwrap();
    let (addr, server) = tcp_oracle(&t, &golds, 1);
    let remote =
        run_evaluation(&t, &golds, &AgentSpec::Tcp(addr), &EvalOptions::default()).unwrap();
    let received = server.join().unwrap();

    assert_eq!(remote.summary.failed, 0);
    assert_eq!(render_reports(&remote.predictions), render_reports(&golds));
    assert_eq!(
        render_metrics_json(&remote.metrics),
        render_metrics_json(&builtin.metrics)
    );
    assert_eq!(remote.metrics.report_accuracy, 1.0);

    let messages: Vec<ProtocolMessage> = received[0]
        .split_inclusive(|&b| b == b'\n')
        .map(|l| protocol_decode(l).unwrap())
        .collect();
    assert_eq!(messages.first().map(|m| m.kind()), Some("hello"));
    assert_eq!(messages.last().map(|m| m.kind()), Some("shutdown"));
    let degree = "L3/disease/respiratory system/infiltrate/degree";
    let l2 = question_text(t.node("L2/disease/respiratory system/infiltrate").unwrap());
    let l1 = question_text(
        t.node(
            t.parent("L2/disease/respiratory system/infiltrate")
                .unwrap(),
        )
        .unwrap(),
    );
    let mut seen = 0;
    for m in &messages {
        if let ProtocolMessage::Question {
            node_id, history, ..
        } = m
        {
            if node_id != degree {
                continue;
            }
            seen += 1;
            let ancestors: Vec<&str> = history
                .iter()
                .filter(|h| h.role == HistoryRole::Ancestor)
                .map(|h| h.q.as_str())
                .collect();
            assert!(ancestors.contains(&l1.as_str()), "{ancestors:?}");
            assert!(ancestors.contains(&l2.as_str()), "{ancestors:?}");
        }
    }
    // asked for p1 and p4; the other sessions stop at a negative ancestor
    assert_eq!(seen, 2);
}

#[test]
fn parallel_tcp_sessions_match_builtin() {
    let (t, golds) = fixture();
    let builtin = run_evaluation(
        &t,
        &golds,
        &AgentSpec::Builtin(BuiltinKind::Oracle),
        &EvalOptions::default(),
    )
    .unwrap();
    let (addr, server) = tcp_oracle(&t, &golds, 3);
    let opts = EvalOptions {
        parallelism: 3,
        ..EvalOptions::default()
    };
    let remote = run_evaluation(&t, &golds, &AgentSpec::Tcp(addr), &opts).unwrap();
    server.join().unwrap();
    assert_eq!(
        render_metrics_json(&remote.metrics),
        render_metrics_json(&builtin.metrics)
    );
}
