use std::io::Cursor;

use asg_core::denoiser::wire::{self, ServerRequest};
use asg_core::denoiser::Condition;
use asg_core::{Shape, Tensor};

const REQUEST: &[u8] = include_bytes!("fixtures/predict_request_4x8x8.bin");
const RESPONSE: &[u8] = include_bytes!("fixtures/predict_response_4x8x8.bin");
const HELLO_REQUEST: &[u8] = include_bytes!("fixtures/hello_request.bin");
const HELLO_RESPONSE: &[u8] = include_bytes!("fixtures/hello_response.bin");
const ERROR_RESPONSE: &[u8] = include_bytes!("fixtures/error_response.bin");

fn fixture_latent() -> Tensor {
    let data = (0..256).map(|i| ((i % 37) as f32 - 18.0) / 8.0).collect();
    Tensor::from_vec(Shape::new(4, 8, 8).unwrap(), data).unwrap()
}

fn fixture_attention() -> Tensor {
    let data = (0..64).map(|i| (i % 8) as f32 / 8.0).collect();
    Tensor::from_vec(Shape::new(1, 8, 8).unwrap(), data).unwrap()
}

#[test]
fn request_serializer_matches_golden_bytes() {
    let frame =
        wire::encode_predict_request(&fixture_latent(), 501, &Condition::token("a photo of a cat"), true).unwrap();
    assert_eq!(frame, REQUEST);
}

#[test]
fn response_writer_matches_golden_bytes() {
    let eps = fixture_latent().scale(0.5).unwrap();
    let mut out = Vec::new();
    wire::write_predict_response(&mut out, &eps, Some(&fixture_attention())).unwrap();
    assert_eq!(out, RESPONSE);
}

#[test]
fn handshake_and_error_frames_match_golden_bytes() {
    assert_eq!(wire::encode_frame(&wire::hello_request(), &[]).unwrap(), HELLO_REQUEST);
    let mut out = Vec::new();
    wire::write_hello_response(&mut out).unwrap();
    assert_eq!(out, HELLO_RESPONSE);
    let mut out = Vec::new();
    wire::write_error_response(&mut out, "payload has 8 bytes but shape 1x2x2 needs 16").unwrap();
    assert_eq!(out, ERROR_RESPONSE);
}

#[test]
fn golden_request_decodes() {
    let req = wire::read_request(&mut Cursor::new(REQUEST)).unwrap().unwrap();
    match req {
        ServerRequest::Predict {
            t,
            cond,
            latent,
            want_attention,
        } => {
            assert_eq!(t, 501);
            assert_eq!(cond, Condition::token("a photo of a cat"));
            assert!(want_attention);
            assert!(latent.bitwise_eq(&fixture_latent()));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn length_prefix_covers_header_only() {
    let n = u32::from_le_bytes(REQUEST[..4].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&REQUEST[4..4 + n]).unwrap();
    assert_eq!(header["payload_bytes"], 1024);
    assert_eq!(REQUEST.len(), 4 + n + 1024);
    let first = f32::from_le_bytes(REQUEST[4 + n..8 + n].try_into().unwrap());
    assert_eq!(first, -18.0 / 8.0);
}

#[test]
fn truncated_frame_is_an_io_error() {
    let cut = &REQUEST[..REQUEST.len() - 3];
    assert!(wire::read_request(&mut Cursor::new(cut)).is_err());
}

#[test]
fn malformed_json_leaves_stream_usable() {
    let mut bytes = 5u32.to_le_bytes().to_vec();
    bytes.extend_from_slice(b"{oops");
    bytes.extend_from_slice(HELLO_REQUEST);
    let mut cur = Cursor::new(bytes);
    assert!(wire::read_request(&mut cur).unwrap().is_err());
    assert_eq!(
        wire::read_request(&mut cur).unwrap().unwrap(),
        ServerRequest::Hello { version: 1 }
    );
}
