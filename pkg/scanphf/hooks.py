app_name = "scanphf"
app_title = "Scanphf"
app_publisher = "Umair Wali"
app_description = "External-memory hypergraph peeling for static functions and minimal perfect hashing"
app_email = "umairwali6@gmail.com"
app_license = "mit"

# Structure builders
# ------------------
# Called with (keys, settings=..., seed=...) and return a structure with `build_stats`

structure_builders = {
	"mwhc-external": "scanphf.scanphf.cli.build_mwhc_external",
	"mwhc-inmemory": "scanphf.scanphf.cli.build_mwhc_inmemory",
	"hem": "scanphf.scanphf.hem.build_hem",
}

# Structure loaders
# ------------------
# Serialized structures are recognized by their first four bytes

structure_loaders = {
	b"EMPH": "scanphf.scanphf.assign_rank.MphfStructure.deserialize",
	b"ESTF": "scanphf.scanphf.assign_rank.StaticFunction.deserialize",
	b"EHEM": "scanphf.scanphf.hem.HemStructure.deserialize",
}

# Key file readers
# ------------------

key_formats = {
	"lines": "scanphf.scanphf.cli.LineKeys",
	"length-prefixed": "scanphf.scanphf.cli.LengthPrefixedKeys",
}
