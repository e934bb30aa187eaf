use atm::jdl::{
    parse_jdl, rewrite_for_monitoring, validate_monitoring_jdl, JdlDocument, JdlValue,
    RewriteParams, WrappedArguments, WRAPPER_EXECUTABLE,
};
use proptest::collection::vec;
use proptest::prelude::*;

fn name() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_]{0,10}".prop_filter("reserved", |n| {
        !matches!(
            n.as_str(),
            "Arguments" | "Executable" | "InputSandbox" | "RetryCount"
        )
    })
}

fn text() -> impl Strategy<Value = String> {
    // Printable ASCII (including quotes and backslashes) plus some non-ASCII.
    "[ -~éλ中]{0,16}"
}

fn token() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_./=:,+-]{1,12}"
}

fn command_token() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_./][A-Za-z0-9_./=:-]{0,11}"
}

fn expression() -> impl Strategy<Value = String> {
    let ident = "[A-Za-z][A-Za-z0-9]{0,8}";
    let lit = "[A-Za-z0-9 ._-]{0,8}";
    prop_oneof![
        (ident, lit).prop_map(|(a, s)| format!("Member(other.{a},\"{s}\")")),
        (ident, 0i64..100_000).prop_map(|(a, n)| format!("other.{a} >= {n}")),
        (ident, ident, lit).prop_map(|(a, b, s)| format!("other.{a} == \"{s}\" && other.{b}")),
        (ident, -50i64..50).prop_map(|(a, n)| format!("({a} * 2) < {n}")),
    ]
}

fn value() -> impl Strategy<Value = JdlValue> {
    prop_oneof![
        text().prop_map(JdlValue::String),
        any::<i64>().prop_map(JdlValue::Number),
        vec(text(), 0..5).prop_map(JdlValue::StringList),
        expression().prop_map(JdlValue::Expression),
    ]
}

fn document() -> impl Strategy<Value = JdlDocument> {
    (
        vec((name(), value()), 0..10),
        prop::option::of(prop_oneof![
            vec(token(), 1..6).prop_map(JdlValue::TokenRun),
            text().prop_map(JdlValue::String),
        ]),
        any::<prop::sample::Index>(),
    )
        .prop_map(|(attrs, arguments, at)| {
            let mut doc = JdlDocument::new();
            for (n, v) in attrs {
                if !doc.contains(&n) {
                    doc.push(n, v).expect("generated values are representable");
                }
            }
            if let Some(a) = arguments {
                // Insert Arguments somewhere in the middle.
                let mut rebuilt = JdlDocument::new();
                let pos = at.index(doc.len() + 1);
                for (i, (n, v)) in doc.iter().enumerate() {
                    if i == pos {
                        rebuilt.push("Arguments", a.clone()).unwrap();
                    }
                    rebuilt.push(n, v.clone()).unwrap();
                }
                if !rebuilt.contains("Arguments") {
                    rebuilt.push("Arguments", a).unwrap();
                }
                doc = rebuilt;
            }
            doc
        })
}

/// An unwrapped job: a random document with an Executable and a plain
/// command line.
fn job() -> impl Strategy<Value = (JdlDocument, String, Vec<String>, Option<u32>, Option<Vec<String>>)> {
    (
        vec((name(), value()), 0..6),
        command_token(),
        vec(command_token(), 0..6),
        any::<bool>(),
        prop::option::of(1u32..100),
        prop::option::of(vec("[A-Za-z0-9_. ]{1,10}", 0..4)),
    )
        .prop_map(|(attrs, exe, args, quoted, retry, sandbox)| {
            let mut doc = JdlDocument::new();
            doc.push("Executable", JdlValue::String(exe.clone())).unwrap();
            for (n, v) in attrs {
                if !doc.contains(&n) {
                    doc.push(n, v).unwrap();
                }
            }
            if let Some(items) = &sandbox {
                doc.push("InputSandbox", JdlValue::StringList(items.clone())).unwrap();
            }
            if let Some(r) = retry {
                doc.push("RetryCount", JdlValue::Number(i64::from(r))).unwrap();
            }
            if !args.is_empty() {
                let value = if quoted {
                    JdlValue::String(args.join(" "))
                } else {
                    JdlValue::TokenRun(args.clone())
                };
                doc.push("Arguments", value).unwrap();
            }
            (doc, exe, args, retry, sandbox)
        })
}

fn params() -> impl Strategy<Value = RewriteParams> {
    (
        "[A-Za-z0-9_-]{1,22}",
        "[A-Za-z0-9]{1,24}",
        "[a-z0-9.*-]{1,16}",
        "http://[a-z0-9.]{1,12}:[0-9]{2,5}",
        1u32..1000,
    )
        .prop_map(|(id, pw, site, url, retry)| {
            RewriteParams::new(id, pw, site, url).with_retry_count(retry)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn render_then_parse_is_identity(doc in document()) {
        let text = doc.render();
        let back = parse_jdl(&text).unwrap();
        prop_assert_eq!(back, doc);
    }

    #[test]
    fn rewritten_documents_validate((doc, ..) in job(), p in params()) {
        let wrapped = rewrite_for_monitoring(&doc, &p).unwrap();
        prop_assert_eq!(validate_monitoring_jdl(&wrapped), vec![]);
        // And they survive a trip through text.
        let reparsed = parse_jdl(&wrapped.render()).unwrap();
        prop_assert_eq!(validate_monitoring_jdl(&reparsed), vec![]);
        prop_assert_eq!(reparsed, wrapped);
    }

    #[test]
    fn decoding_inverts_the_rewrite((doc, exe, args, ..) in job(), p in params()) {
        let wrapped = rewrite_for_monitoring(&doc, &p).unwrap();
        let decoded = WrappedArguments::from_document(&wrapped).unwrap();
        prop_assert_eq!(decoded, WrappedArguments {
            job_id: p.job_id.clone(),
            password: p.password.clone(),
            site: p.site.clone(),
            atm_url: Some(p.atm_url.clone()),
            executable: exe,
            args,
        });
    }

    #[test]
    fn untouched_attributes_survive_in_order((doc, _, _, retry, sandbox) in job(), p in params()) {
        let wrapped = rewrite_for_monitoring(&doc, &p).unwrap();
        let managed = ["Executable", "InputSandbox", "RetryCount", "Arguments"];
        let keep = |d: &JdlDocument| -> Vec<(String, JdlValue)> {
            d.iter()
                .filter(|(n, _)| !managed.contains(n))
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect()
        };
        prop_assert_eq!(keep(&wrapped), keep(&doc));

        let mut expected_sandbox = vec![WRAPPER_EXECUTABLE.to_string()];
        expected_sandbox.extend(sandbox.unwrap_or_default());
        prop_assert_eq!(
            wrapped.get("InputSandbox"),
            Some(&JdlValue::StringList(expected_sandbox))
        );
        let expected_retry = i64::from(retry.unwrap_or(p.retry_count));
        prop_assert_eq!(wrapped.get("RetryCount"), Some(&JdlValue::Number(expected_retry)));
        // Managed attributes that already existed keep their position.
        let names = |d: &JdlDocument| d.names().map(str::to_string).collect::<Vec<_>>();
        let before = names(&doc);
        let after = names(&wrapped);
        let pos = |v: &[String], n: &str| v.iter().position(|x| x == n);
        for n in &before {
            let (Some(i), Some(j)) = (pos(&before, n), pos(&after, n)) else {
                return Err(TestCaseError::fail(format!("{n} lost")));
            };
            for m in &before[i + 1..] {
                prop_assert!(pos(&after, m).unwrap() > j, "{} moved before {}", m, n);
            }
        }
    }

    #[test]
    fn rewriting_twice_is_refused((doc, ..) in job(), p in params()) {
        let wrapped = rewrite_for_monitoring(&doc, &p).unwrap();
        prop_assert!(rewrite_for_monitoring(&wrapped, &p).is_err());
    }

    #[test]
    fn arbitrary_text_never_panics(text in "[ -~\n]{0,200}") {
        let _ = parse_jdl(&text);
    }
}
