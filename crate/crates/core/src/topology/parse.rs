//! Topohub-style JSON and GraphML importers.

use serde_json::{Map, Value};

use super::{LinkAttrs, LinkSpec, NodeKind, NodeResources, NodeSpec, Role, Topology, TopologyError};

fn schema(path: impl Into<String>, message: impl Into<String>) -> TopologyError {
    TopologyError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn check_keys(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<(), TopologyError> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(schema(format!("{path}.{k}"), "unknown key"));
        }
    }
    Ok(())
}

fn str_field<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a str, TopologyError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(schema(format!("{path}.{key}"), "expected a string")),
        None => Err(schema(format!("{path}.{key}"), "missing required field")),
    }
}

fn num_field(obj: &Map<String, Value>, path: &str, key: &str) -> Result<Option<f64>, TopologyError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => Ok(n.as_f64()),
        Some(_) => Err(schema(format!("{path}.{key}"), "expected a number")),
    }
}

/// Parses the JSON topology schema documented in `docs/topology.md`.
///
/// Link attributes missing from the file fall back to `default_link`.
pub fn parse_topohub_json(bytes: &[u8], default_link: &LinkAttrs) -> Result<Topology, TopologyError> {
    let root: Value = serde_json::from_slice(bytes)
        .map_err(|e| schema("$", format!("line {} column {}: {e}", e.line(), e.column())))?;
    let root = root.as_object().ok_or_else(|| schema("$", "expected an object"))?;
    check_keys(root, "$", &["name", "nodes", "links"])?;

    let nodes_v = root
        .get("nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("$.nodes", "expected an array"))?;
    let mut nodes = Vec::with_capacity(nodes_v.len());
    for (i, n) in nodes_v.iter().enumerate() {
        let path = format!("$.nodes[{i}]");
        let obj = n.as_object().ok_or_else(|| schema(&path, "expected an object"))?;
        check_keys(obj, &path, &["id", "kind", "role", "resources"])?;
        let id = str_field(obj, &path, "id")?.to_string();
        let kind = match obj.get("kind") {
            None => NodeKind::Host,
            Some(Value::String(s)) if s == "host" => NodeKind::Host,
            Some(Value::String(s)) if s == "switch" => NodeKind::Switch,
            Some(_) => return Err(schema(format!("{path}.kind"), "expected \"host\" or \"switch\"")),
        };
        let role = match obj.get("role") {
            None => Role::Transit,
            Some(Value::String(s)) => {
                Role::parse(s).ok_or_else(|| schema(format!("{path}.role"), format!("unknown role {s:?}")))?
            }
            Some(_) => return Err(schema(format!("{path}.role"), "expected a string")),
        };
        let resources = match obj.get("resources") {
            None | Some(Value::Null) => None,
            Some(Value::Object(r)) => {
                let rp = format!("{path}.resources");
                check_keys(r, &rp, &["cpu_units", "mem_mb"])?;
                let d = NodeResources::default();
                Some(NodeResources {
                    cpu_units: num_field(r, &rp, "cpu_units")?.unwrap_or(d.cpu_units),
                    mem_mb: num_field(r, &rp, "mem_mb")?.unwrap_or(d.mem_mb),
                })
            }
            Some(_) => return Err(schema(format!("{path}.resources"), "expected an object")),
        };
        let resources = match kind {
            NodeKind::Host => Some(resources.unwrap_or_default()),
            NodeKind::Switch => resources,
        };
        nodes.push(NodeSpec { id, kind, role, resources });
    }

    let links_v = root
        .get("links")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("$.links", "expected an array"))?;
    let mut links = Vec::with_capacity(links_v.len());
    for (i, l) in links_v.iter().enumerate() {
        let path = format!("$.links[{i}]");
        let obj = l.as_object().ok_or_else(|| schema(&path, "expected an object"))?;
        check_keys(obj, &path, &["a", "b", "bw", "delay", "loss"])?;
        let a = str_field(obj, &path, "a")?;
        let b = str_field(obj, &path, "b")?;
        let attrs = LinkAttrs {
            bandwidth_mbps: num_field(obj, &path, "bw")?.unwrap_or(default_link.bandwidth_mbps),
            delay_ms: num_field(obj, &path, "delay")?.unwrap_or(default_link.delay_ms),
            loss_frac: num_field(obj, &path, "loss")?.unwrap_or(default_link.loss_frac),
        };
        links.push(LinkSpec::new(a, b, attrs));
    }
    Topology::new(nodes, links)
}

/// Parses GraphML (e.g. Internet Topology Zoo exports).
///
/// Recognised data keys, matched on `attr.name` (or the key id when no name is
/// given): `bandwidth` (Mbps), `delay` (ms), `loss` (fraction) on edges and
/// `role` on nodes. Everything else is ignored. Every node becomes a host.
pub fn parse_graphml(bytes: &[u8], default_link: &LinkAttrs) -> Result<Topology, TopologyError> {
    let text = std::str::from_utf8(bytes).map_err(|e| schema("$", format!("invalid UTF-8: {e}")))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| schema("$", format!("malformed XML: {e}")))?;
    let root = doc.root_element();
    if root.tag_name().name() != "graphml" {
        return Err(schema("/", format!("expected <graphml>, found <{}>", root.tag_name().name())));
    }

    // key id -> recognised attribute name
    let mut keys = std::collections::BTreeMap::new();
    for key in root.children().filter(|n| n.has_tag_name("key")) {
        let Some(id) = key.attribute("id") else { continue };
        let name = key.attribute("attr.name").unwrap_or(id).to_ascii_lowercase();
        keys.insert(id.to_string(), name);
    }

    let graph = root
        .children()
        .find(|n| n.has_tag_name("graph"))
        .ok_or_else(|| schema("/graphml", "missing <graph> element"))?;

    let data_of = |node: roxmltree::Node<'_, '_>, wanted: &str| -> Option<String> {
        node.children()
            .filter(|c| c.has_tag_name("data"))
            .find(|c| c.attribute("key").and_then(|k| keys.get(k)).map(String::as_str) == Some(wanted))
            .map(|c| c.text().unwrap_or("").trim().to_string())
    };

    let mut nodes = Vec::new();
    for (i, n) in graph.children().filter(|n| n.has_tag_name("node")).enumerate() {
        let path = format!("/graphml/graph/node[{i}]");
        let id = n
            .attribute("id")
            .ok_or_else(|| schema(&path, "node without id"))?
            .to_string();
        let role = match data_of(n, "role") {
            None => Role::Transit,
            Some(r) => Role::parse(&r).ok_or_else(|| schema(format!("{path}/role"), format!("unknown role {r:?}")))?,
        };
        nodes.push(NodeSpec::host(id, role, NodeResources::default()));
    }

    let mut links = Vec::new();
    for (i, e) in graph.children().filter(|n| n.has_tag_name("edge")).enumerate() {
        let path = format!("/graphml/graph/edge[{i}]");
        let a = e.attribute("source").ok_or_else(|| schema(&path, "edge without source"))?;
        let b = e.attribute("target").ok_or_else(|| schema(&path, "edge without target"))?;
        let num = |key: &str, default: f64| -> Result<f64, TopologyError> {
            match data_of(e, key) {
                None => Ok(default),
                Some(s) => s
                    .parse::<f64>()
                    .map_err(|_| schema(format!("{path}/{key}"), format!("not a number: {s:?}"))),
            }
        };
        let attrs = LinkAttrs {
            bandwidth_mbps: num("bandwidth", default_link.bandwidth_mbps)?,
            delay_ms: num("delay", default_link.delay_ms)?,
            loss_frac: num("loss", default_link.loss_frac)?,
        };
        links.push(LinkSpec::new(a, b, attrs));
    }
    Topology::new(nodes, links)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEF: LinkAttrs = LinkAttrs {
        bandwidth_mbps: 100.0,
        delay_ms: 1.0,
        loss_frac: 0.0,
    };

    #[test]
    fn minimal_json() {
        let j = br#"{"nodes":[{"id":"h1"},{"id":"h2"}],"links":[{"a":"h1","b":"h2","bw":100,"delay":5,"loss":0}]}"#;
        let t = parse_topohub_json(j, &DEF).unwrap();
        assert_eq!(t.nodes().len(), 2);
        assert_eq!(t.links().len(), 1);
        assert!(t.adjacency()["h1"].contains("h2"));
        assert!(t.adjacency()["h2"].contains("h1"));
        assert_eq!(t.links()[0].attrs.delay_ms, 5.0);
    }

    #[test]
    fn json_order_independent() {
        let a = br#"{"nodes":[{"id":"h1"},{"id":"h2"},{"id":"s","kind":"switch"}],
            "links":[{"a":"h1","b":"s"},{"a":"s","b":"h2","bw":10}]}"#;
        let b = br#"{"nodes":[{"id":"s","kind":"switch"},{"id":"h2"},{"id":"h1"}],
            "links":[{"a":"h2","b":"s","bw":10},{"a":"s","b":"h1"}]}"#;
        assert_eq!(parse_topohub_json(a, &DEF).unwrap(), parse_topohub_json(b, &DEF).unwrap());
    }

    #[test]
    fn json_disconnected() {
        let j = br#"{"nodes":[{"id":"h1"},{"id":"h2"},{"id":"h3"}],"links":[{"a":"h1","b":"h2"}]}"#;
        match parse_topohub_json(j, &DEF).unwrap_err() {
            TopologyError::DisconnectedGraph { unreachable } => assert_eq!(unreachable, vec!["h3"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn json_schema_errors_carry_paths() {
        let j = br#"{"nodes":[{"id":"h1","kind":"router"}],"links":[]}"#;
        match parse_topohub_json(j, &DEF).unwrap_err() {
            TopologyError::Schema { path, .. } => assert_eq!(path, "$.nodes[0].kind"),
            e => panic!("unexpected {e}"),
        }
        let j = br#"{"nodes":[{"id":"h1"}],"links":[{"a":"h1","b":"h1","colour":1}]}"#;
        match parse_topohub_json(j, &DEF).unwrap_err() {
            TopologyError::Schema { path, .. } => assert_eq!(path, "$.links[0].colour"),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_topohub_json(b"{nope", &DEF).unwrap_err(),
            TopologyError::Schema { .. }
        ));
    }

    #[test]
    fn json_duplicate_link() {
        let j = br#"{"nodes":[{"id":"a"},{"id":"b"}],"links":[{"a":"a","b":"b"},{"a":"b","b":"a"}]}"#;
        assert!(matches!(
            parse_topohub_json(j, &DEF).unwrap_err(),
            TopologyError::DuplicateLink { .. }
        ));
    }

    #[test]
    fn graphml_defaults() {
        let g = br#"<?xml version="1.0"?>
<graphml xmlns="http://graphml.graphdrawing.org/xmlns">
  <graph edgedefault="undirected">
    <node id="n0"/><node id="n1"/>
    <edge source="n0" target="n1"/>
  </graph>
</graphml>"#;
        let t = parse_graphml(g, &DEF).unwrap();
        assert_eq!(t.links()[0].attrs, DEF);
        assert!(t.nodes().values().all(|n| n.is_host() && n.role == Role::Transit));
    }

    #[test]
    fn graphml_keys() {
        let g = br#"<graphml>
  <key id="d0" for="edge" attr.name="bandwidth" attr.type="double"/>
  <key id="d1" for="node" attr.name="role" attr.type="string"/>
  <key id="d2" for="node" attr.name="Label" attr.type="string"/>
  <graph>
    <node id="a"><data key="d1">server</data><data key="d2">Vienna</data></node>
    <node id="b"/>
    <edge source="a" target="b"><data key="d0">50</data></edge>
  </graph>
</graphml>"#;
        let t = parse_graphml(g, &DEF).unwrap();
        assert_eq!(t.links()[0].attrs.bandwidth_mbps, 50.0);
        assert_eq!(t.node("a").unwrap().role, Role::Server);
    }

    #[test]
    fn graphml_malformed() {
        assert!(matches!(
            parse_graphml(b"<graphml><graph>", &DEF).unwrap_err(),
            TopologyError::Schema { .. }
        ));
    }
}
