//! External evaluator contract: `{"prompt": text}` in, `{"score": x}` out,
//! over a child process or `POST /evaluate`.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::{Objective, ObjectiveError};
use crate::domain::Prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvaluatorEndpoint {
    Subprocess { command: String, args: Vec<String> },
    Http { base_url: String },
}

#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    pub endpoint: EvaluatorEndpoint,
    pub timeout: Duration,
    /// Set when the evaluator tolerates concurrent requests.
    pub parallel_safe: bool,
}

#[derive(Serialize)]
struct Request<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct Response {
    score: f64,
}

fn parse_response(body: &str) -> Result<f64, ObjectiveError> {
    let r: Response = serde_json::from_str(body.trim()).map_err(|e| ObjectiveError::Malformed(format!("{e}: {body:.200}")))?;
    Ok(r.score)
}

impl ExternalEvaluator {
    pub fn new(endpoint: EvaluatorEndpoint, timeout: Duration) -> Self {
        Self {
            endpoint,
            timeout,
            parallel_safe: false,
        }
    }

    fn run_subprocess(&self, command: &str, args: &[String], body: &[u8]) -> Result<f64, ObjectiveError> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ObjectiveError::Evaluator(format!("cannot start `{command}`: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let body = body.to_vec();
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(&body);
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let status = match child.wait_timeout(self.timeout) {
            Ok(Some(status)) => status,
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ObjectiveError::Timeout(self.timeout));
            }
            Err(e) => return Err(ObjectiveError::Evaluator(e.to_string())),
        };
        let _ = writer.join();
        let out = reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(ObjectiveError::Evaluator(format!("exit status {status}: {}", err.trim())));
        }
        parse_response(&out)
    }

    fn run_http(&self, base_url: &str, body: &[u8]) -> Result<f64, ObjectiveError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/evaluate", base_url.trim_end_matches('/'));
        let resp = agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => ObjectiveError::Timeout(self.timeout),
                other => ObjectiveError::Evaluator(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| ObjectiveError::Evaluator(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ObjectiveError::Evaluator(format!("HTTP {status}: {text:.200}")));
        }
        parse_response(&text)
    }
}

impl Objective for ExternalEvaluator {
    fn evaluate(&self, prompt: &Prompt) -> Result<f64, ObjectiveError> {
        let body = serde_json::to_vec(&Request { prompt: prompt.as_str() }).expect("request serializes");
        match &self.endpoint {
            EvaluatorEndpoint::Subprocess { command, args } => self.run_subprocess(command, args, &body),
            EvaluatorEndpoint::Http { base_url } => self.run_http(base_url, &body),
        }
    }

    fn parallel_safe(&self) -> bool {
        self.parallel_safe
    }

    fn describe(&self) -> String {
        match &self.endpoint {
            EvaluatorEndpoint::Subprocess { command, .. } => format!("subprocess:{command}"),
            EvaluatorEndpoint::Http { base_url } => format!("http:{base_url}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ScoreCache;
    use std::io::{BufRead, BufReader};
    use std::net::TcpListener;

    fn sh(script: &str) -> ExternalEvaluator {
        ExternalEvaluator::new(
            EvaluatorEndpoint::Subprocess {
                command: "sh".into(),
                args: vec!["-c".into(), script.into()],
            },
            Duration::from_secs(5),
        )
    }

    #[test]
    fn subprocess_passthrough() {
        let e = sh("cat > /dev/null; echo '{\"score\": 0.42}'");
        assert_eq!(e.evaluate(&Prompt::new("p").unwrap()).unwrap(), 0.42);
    }

    #[test]
    fn subprocess_receives_prompt_json() {
        let e = sh("grep -q '\"prompt\":\"hello world\"' && echo '{\"score\": 1}' || echo '{\"score\": 0}'");
        assert_eq!(e.evaluate(&Prompt::new("hello world").unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_is_clamped_by_cache() {
        let c = ScoreCache::new(sh("cat > /dev/null; echo '{\"score\": 1.7}'"));
        let s = c.evaluate(&Prompt::new("p").unwrap()).unwrap();
        assert_eq!(s.score, 1.0);
        assert_eq!(s.clamped_from, Some(1.7));
    }

    #[test]
    fn subprocess_failures() {
        let p = Prompt::new("p").unwrap();
        assert!(matches!(sh("exit 3").evaluate(&p), Err(ObjectiveError::Evaluator(_))));
        assert!(matches!(sh("cat > /dev/null; echo nope").evaluate(&p), Err(ObjectiveError::Malformed(_))));
        let mut slow = sh("sleep 5");
        slow.timeout = Duration::from_millis(200);
        assert!(matches!(slow.evaluate(&p), Err(ObjectiveError::Timeout(_))));
    }

    #[test]
    fn http_posts_to_evaluate() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let reply = "{\"score\": 0.25}";
            write!(stream, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nContent-Type: application/json\r\n\r\n{reply}", reply.len()).unwrap();
            (request_line, String::from_utf8(body).unwrap())
        });
        let e = ExternalEvaluator::new(
            EvaluatorEndpoint::Http {
                base_url: format!("http://{addr}/"),
            },
            Duration::from_secs(5),
        );
        assert_eq!(e.evaluate(&Prompt::new("x").unwrap()).unwrap(), 0.25);
        let (line, body) = server.join().unwrap();
        assert!(line.starts_with("POST /evaluate "));
        assert_eq!(body, "{\"prompt\":\"x\"}");
    }
}
