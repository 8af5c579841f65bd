use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use asg_core::denoiser::wire::{self, ServerRequest};
use asg_core::denoiser::{Condition, NoisePredictor, PredictorError, RemotePredictorClient};
use asg_core::engine::{run_pipeline, ExecutorMode, PipelineConfig, PredictorKind, PredictorSpec};
use asg_core::rng::SeededRng;
use asg_core::{Shape, Tensor};

#[derive(Clone, Copy)]
enum Behavior {
    Echo,
    /// Echo, but ε is scaled by 0.5 and attention is a ramp.
    Half,
    WrongShape,
    Fail,
    Stall,
    OldVersion,
}

fn handle(stream: TcpStream, behavior: Behavior) {
    let mut r = BufReader::new(stream.try_clone().unwrap());
    let mut w = BufWriter::new(stream);
    loop {
        let req = match wire::read_request(&mut r) {
            Ok(req) => req,
            Err(_) => return,
        };
        let res = match req {
            Err(msg) => wire::write_error_response(&mut w, &msg),
            Ok(ServerRequest::Hello { .. }) => match behavior {
                Behavior::OldVersion => wire::write_frame(&mut w, &serde_json::json!({"ok": true, "version": 0}), &[]),
                _ => wire::write_hello_response(&mut w),
            },
            Ok(ServerRequest::Predict {
                latent, want_attention, ..
            }) => {
                let s = latent.shape();
                let att = want_attention.then(|| {
                    let data = (0..s.plane()).map(|i| i as f32).collect();
                    Tensor::from_vec(Shape::new(1, s.height, s.width).unwrap(), data).unwrap()
                });
                match behavior {
                    Behavior::Echo => wire::write_predict_response(&mut w, &latent, att.as_ref()),
                    Behavior::Half => wire::write_predict_response(&mut w, &latent.scale(0.5).unwrap(), att.as_ref()),
                    Behavior::WrongShape => {
                        let other = Tensor::zeros(Shape::new(s.channels, s.height, s.width + 1).unwrap());
                        wire::write_predict_response(&mut w, &other, None)
                    }
                    Behavior::Fail => wire::write_error_response(&mut w, "model exploded"),
                    Behavior::Stall => {
                        thread::sleep(Duration::from_millis(600));
                        return;
                    }
                    Behavior::OldVersion => unreachable!(),
                }
            }
        };
        if res.is_err() || w.flush().is_err() {
            return;
        }
    }
}

fn serve(behavior: Behavior) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { return };
            thread::spawn(move || handle(stream, behavior));
        }
    });
    addr
}

fn connect(addr: &str) -> Result<RemotePredictorClient, PredictorError> {
    RemotePredictorClient::connect_tcp(addr, Duration::from_millis(300))
}

#[test]
fn echo_is_bitwise() {
    let client = connect(&serve(Behavior::Echo)).unwrap();
    let x = Tensor::randn([4, 8, 8], &mut SeededRng::new(1)).unwrap();
    for _ in 0..3 {
        let out = client.predict(&x, 17, &Condition::token("cat")).unwrap();
        assert!(out.eps_hat.bitwise_eq(&x));
        assert_eq!(out.attention.unwrap().shape(), Shape::new(1, 8, 8).unwrap());
    }
    let client = client.with_attention(false);
    assert!(client.predict(&x, 17, &Condition::none()).unwrap().attention.is_none());
}

#[test]
fn wrong_shape_is_reported_and_stream_stays_aligned() {
    let client = connect(&serve(Behavior::WrongShape)).unwrap();
    let x = Tensor::zeros(Shape::new(2, 4, 4).unwrap());
    for _ in 0..2 {
        let err = client.predict(&x, 3, &Condition::none()).unwrap_err();
        assert!(matches!(err, PredictorError::ShapeMismatch { .. }), "{err}");
    }
}

#[test]
fn server_error_is_surfaced() {
    let client = connect(&serve(Behavior::Fail)).unwrap();
    let err = client
        .predict(&Tensor::zeros(Shape::new(1, 2, 2).unwrap()), 3, &Condition::none())
        .unwrap_err();
    assert!(
        matches!(err, PredictorError::Server(ref m) if m == "model exploded"),
        "{err}"
    );
}

#[test]
fn version_mismatch_rejected_at_handshake() {
    let err = connect(&serve(Behavior::OldVersion)).err().unwrap();
    assert!(
        matches!(err, PredictorError::VersionMismatch { expected: 1, got: 0 }),
        "{err}"
    );
}

#[test]
fn stalled_server_times_out() {
    let client = connect(&serve(Behavior::Stall)).unwrap();
    let err = client
        .predict(&Tensor::zeros(Shape::new(1, 2, 2).unwrap()), 3, &Condition::none())
        .unwrap_err();
    assert!(matches!(err, PredictorError::Timeout), "{err}");
}

#[test]
fn refused_connection_is_an_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    assert!(connect(&addr).is_err());
}

#[test]
fn pipeline_runs_over_remote_predictors() {
    let addr = serve(Behavior::Half);
    let mut sums = Vec::new();
    for mode in ExecutorMode::ALL {
        let cfg = PipelineConfig {
            steps: 6,
            channels: 2,
            executor: mode,
            predictor: PredictorSpec {
                kind: PredictorKind::Remote {
                    addr: addr.clone(),
                    timeout: Duration::from_secs(5),
                },
                ..Default::default()
            },
            ..Default::default()
        };
        let (out, report) = run_pipeline(&cfg).unwrap();
        assert_eq!(report.stage1_iterations, 3);
        sums.push(out.checksum());
    }
    assert_eq!(sums[0], sums[1]);
}
